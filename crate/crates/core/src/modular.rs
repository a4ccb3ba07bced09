//! Per-task modules behind one shared initialization, with hard gating.
//!
//! Every module is an identical architecture instantiated as a bitwise copy
//! of θ_shared. A hard (one-hot) gate routes each coordinate to exactly one
//! module, so training one task's module cannot move any other task's
//! parameters — forgetting is zero by construction, and composition is just
//! a scatter of per-module predictions.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::field::{FieldArch, FieldModel};
use crate::task::{BoxRegion, Region};
use crate::tensor::Tensor;

/// Counts lookups that fell outside every region (routed to the nearest).
pub static GATE_MISSES: AtomicU64 = AtomicU64::new(0);

/// The meta-learned starting point every module copies.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedInit {
    pub arch: FieldArch,
    pub params: Tensor,
}

impl SharedInit {
    pub fn new(arch: FieldArch, params: Tensor) -> Result<Self> {
        if params.len() != arch.param_count() {
            return Err(Error::dim(
                "SharedInit::new",
                arch.param_count(),
                params.len(),
            ));
        }
        Ok(SharedInit { arch, params })
    }
}

/// Hard coordinate gate: which module owns a coordinate.
#[derive(Debug, Clone, PartialEq)]
pub enum Gate {
    /// Disjoint axis-aligned boxes; boundary coordinates go to the
    /// lowest-index containing box.
    Boxes(Vec<BoxRegion>),
    /// Resolution phases on a 2-d grid: module k owns pixels whose
    /// (row mod 2, col mod 2) equals `phases[k]`.
    Phase {
        dims: [usize; 2],
        phases: Vec<(usize, usize)>,
    },
}

impl Gate {
    /// Builds a gate from task regions. Box regions must be pairwise
    /// disjoint and cover the domain; `dims` is the signal grid (needed for
    /// phase gating).
    pub fn from_regions(regions: &[Region], dims: &[usize]) -> Result<Gate> {
        if regions.is_empty() {
            return Err(Error::contract("gate needs at least one region".to_string()));
        }
        if regions.iter().all(|r| matches!(r, Region::Box(_))) {
            let boxes: Vec<BoxRegion> = regions
                .iter()
                .map(|r| match r {
                    Region::Box(b) => b.clone(),
                    _ => unreachable!(),
                })
                .collect();
            check_partition(&boxes)?;
            Ok(Gate::Boxes(boxes))
        } else if regions.iter().all(|r| matches!(r, Region::Phase { .. })) {
            if dims.len() != 2 {
                return Err(Error::contract(
                    "phase gating requires a 2-d grid".to_string(),
                ));
            }
            let phases: Vec<(usize, usize)> = regions
                .iter()
                .map(|r| match r {
                    Region::Phase { row, col } => (*row, *col),
                    _ => unreachable!(),
                })
                .collect();
            let mut sorted = phases.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != phases.len() {
                return Err(Error::contract("duplicate phase regions".to_string()));
            }
            Ok(Gate::Phase {
                dims: [dims[0], dims[1]],
                phases,
            })
        } else {
            Err(Error::contract(
                "cannot mix box and phase regions in one gate".to_string(),
            ))
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Gate::Boxes(b) => b.len(),
            Gate::Phase { phases, .. } => phases.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Module index owning one coordinate.
    pub fn lookup_one(&self, coord: &[f64]) -> usize {
        match self {
            Gate::Boxes(boxes) => {
                for (k, b) in boxes.iter().enumerate() {
                    if b.contains(coord) {
                        return k;
                    }
                }
                GATE_MISSES.fetch_add(1, Ordering::Relaxed);
                // Route to the nearest box.
                let mut best = (0usize, f64::INFINITY);
                for (k, b) in boxes.iter().enumerate() {
                    let d2: f64 = coord
                        .iter()
                        .zip(b.lo.iter().zip(&b.hi))
                        .map(|(&x, (&lo, &hi))| {
                            let d = (lo - x).max(0.0).max(x - hi);
                            d * d
                        })
                        .sum();
                    if d2 < best.1 {
                        best = (k, d2);
                    }
                }
                best.0
            }
            Gate::Phase { dims, phases } => {
                let to_index = |x: f64, n: usize| -> usize {
                    if n <= 1 {
                        0
                    } else {
                        let t = (x + 1.0) * 0.5 * (n - 1) as f64;
                        t.round().clamp(0.0, (n - 1) as f64) as usize
                    }
                };
                let r = to_index(coord[0], dims[0]) % 2;
                let c = to_index(coord[1], dims[1]) % 2;
                match phases.iter().position(|&p| p == (r, c)) {
                    Some(k) => k,
                    None => {
                        GATE_MISSES.fetch_add(1, Ordering::Relaxed);
                        0
                    }
                }
            }
        }
    }
}

fn check_partition(boxes: &[BoxRegion]) -> Result<()> {
    let d = boxes[0].lo.len();
    for (i, a) in boxes.iter().enumerate() {
        if a.lo.len() != d {
            return Err(Error::contract("box dimensionality mismatch".to_string()));
        }
        for b in &boxes[i + 1..] {
            if a.overlaps(b) {
                return Err(Error::contract(format!(
                    "regions overlap: {:?} and {:?}",
                    a, b
                )));
            }
        }
    }
    let domain = 2f64.powi(d as i32);
    let covered: f64 = boxes.iter().map(|b| b.volume()).sum();
    if (covered - domain).abs() > 1e-6 * domain {
        return Err(Error::contract(format!(
            "regions cover volume {covered:.6}, domain has {domain:.6}"
        )));
    }
    Ok(())
}

/// An ordered set of modules plus the gate that routes coordinates.
#[derive(Debug, Clone)]
pub struct ModularField {
    pub shared: SharedInit,
    pub modules: Vec<FieldModel>,
    pub gate: Gate,
}

impl ModularField {
    pub fn n_modules(&self) -> usize {
        self.modules.len()
    }

    pub fn param_total(&self) -> usize {
        self.modules.iter().map(|m| m.params.len()).sum()
    }
}

/// Creates one module per region, each an exact copy of θ_shared.
pub fn instantiate(shared: &SharedInit, regions: &[Region], dims: &[usize]) -> Result<ModularField> {
    let gate = Gate::from_regions(regions, dims)?;
    let modules = (0..gate.len())
        .map(|_| FieldModel::new(shared.arch.clone(), shared.params.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModularField {
        shared: shared.clone(),
        modules,
        gate,
    })
}

/// Module index per coordinate row (hard, one-hot gating).
pub fn gate_lookup(field: &ModularField, coords: &Tensor) -> Vec<usize> {
    (0..coords.rows())
        .map(|r| field.gate.lookup_one(coords.row(r)))
        .collect()
}

/// Routed prediction: output row b comes from the module owning coords[b].
pub fn compose_predict(field: &ModularField, coords: &Tensor) -> Tensor {
    let owners = gate_lookup(field, coords);
    let m = coords.rows();
    let d = coords.cols();
    let c = field.shared.arch.d_out;
    let mut out = Tensor::zeros(&[m, c]);
    for (k, module) in field.modules.iter().enumerate() {
        let rows: Vec<usize> = (0..m).filter(|&r| owners[r] == k).collect();
        if rows.is_empty() {
            continue;
        }
        let mut sub = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            sub.extend_from_slice(coords.row(r));
        }
        let sub = Tensor::new(vec![rows.len(), d], sub).unwrap();
        let pred = module.predict(&sub);
        for (i, &r) in rows.iter().enumerate() {
            out.data_mut()[r * c..(r + 1) * c].copy_from_slice(pred.row(i));
        }
    }
    out
}

/// Appends a module for a new region, initialized from θ_shared. Existing
/// modules are untouched.
pub fn expand(field: &ModularField, new_region: &Region) -> Result<ModularField> {
    let mut gate = field.gate.clone();
    match (&mut gate, new_region) {
        (Gate::Boxes(boxes), Region::Box(b)) => {
            for existing in boxes.iter() {
                if existing.overlaps(b) {
                    return Err(Error::contract(format!(
                        "new region overlaps existing: {:?}",
                        b
                    )));
                }
            }
            boxes.push(b.clone());
        }
        (Gate::Phase { phases, .. }, Region::Phase { row, col }) => {
            if phases.contains(&(*row, *col)) {
                return Err(Error::contract(format!(
                    "phase ({row},{col}) already owned"
                )));
            }
            phases.push((*row, *col));
        }
        _ => {
            return Err(Error::contract(
                "new region kind does not match the field's gate".to_string(),
            ))
        }
    }
    let mut modules = field.modules.clone();
    modules.push(FieldModel::new(
        field.shared.arch.clone(),
        field.shared.params.clone(),
    )?);
    Ok(ModularField {
        shared: field.shared.clone(),
        modules,
        gate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldArch;
    use crate::rng::Rng;
    use crate::task::{split_spatial, Signal, SignalKind};

    fn shared(d_in: usize) -> SharedInit {
        let arch = FieldArch::sine(3, 8, d_in, 1);
        let params = crate::field::init_params(&arch, &mut Rng::with_stream(1, 2)).unwrap();
        SharedInit::new(arch, params).unwrap()
    }

    fn four_boxes() -> Vec<Region> {
        (0..4)
            .map(|k| {
                Region::Box(BoxRegion {
                    lo: vec![-1.0 + 0.5 * k as f64, -1.0],
                    hi: vec![-0.5 + 0.5 * k as f64, 1.0],
                })
            })
            .collect()
    }

    #[test]
    fn instantiate_copies_shared_bitwise() {
        let s = shared(2);
        let field = instantiate(&s, &four_boxes(), &[8, 8]).unwrap();
        assert_eq!(field.n_modules(), 4);
        for m in &field.modules {
            assert_eq!(m.params, s.params);
        }
    }

    #[test]
    fn instantiate_is_idempotent() {
        let s = shared(2);
        let a = instantiate(&s, &four_boxes(), &[8, 8]).unwrap();
        let b = instantiate(&s, &four_boxes(), &[8, 8]).unwrap();
        for (x, y) in a.modules.iter().zip(&b.modules) {
            assert_eq!(x.params, y.params);
        }
    }

    #[test]
    fn overlapping_regions_rejected() {
        let s = shared(2);
        let regions = vec![
            Region::Box(BoxRegion {
                lo: vec![-1.0, -1.0],
                hi: vec![0.5, 1.0],
            }),
            Region::Box(BoxRegion {
                lo: vec![0.0, -1.0],
                hi: vec![1.0, 1.0],
            }),
        ];
        assert!(instantiate(&s, &regions, &[8, 8]).is_err());
    }

    #[test]
    fn non_covering_regions_rejected() {
        let s = shared(2);
        let regions = vec![Region::Box(BoxRegion {
            lo: vec![-1.0, -1.0],
            hi: vec![0.0, 1.0],
        })];
        assert!(instantiate(&s, &regions, &[8, 8]).is_err());
    }

    #[test]
    fn boundary_goes_to_lower_index() {
        let s = shared(2);
        let field = instantiate(&s, &four_boxes(), &[8, 8]).unwrap();
        // −0.5 is the 0|1 boundary.
        assert_eq!(field.gate.lookup_one(&[-0.5, 0.0]), 0);
        assert_eq!(field.gate.lookup_one(&[-0.25, 0.0]), 1);
    }

    #[test]
    fn interior_point_routed_to_its_region() {
        let s = shared(2);
        let field = instantiate(&s, &four_boxes(), &[8, 8]).unwrap();
        assert_eq!(field.gate.lookup_one(&[0.25, 0.3]), 2);
    }

    #[test]
    fn uniform_grid_split_counts_quarters() {
        // Gate built from a real spatial split: each module claims one
        // quarter of the pixels.
        let n = 16;
        let data: Vec<f64> = vec![0.5; n * n];
        let sig = Signal::new(
            SignalKind::Image,
            "g",
            vec![n, n],
            1,
            0.0,
            1.0,
            Tensor::new(vec![n * n, 1], data).unwrap(),
        )
        .unwrap();
        let ep = split_spatial(&sig, 4, 1).unwrap();
        let s = shared(2);
        let field = instantiate(&s, &ep.regions(), &[n, n]).unwrap();
        let owners = gate_lookup(&field, &ep.eval.coords);
        let mut counts = [0usize; 4];
        for &o in &owners {
            counts[o] += 1;
        }
        assert_eq!(counts, [64, 64, 64, 64]);
    }

    #[test]
    fn identical_modules_match_single_model() {
        let s = shared(2);
        let field = instantiate(&s, &four_boxes(), &[8, 8]).unwrap();
        let single = FieldModel::new(s.arch.clone(), s.params.clone()).unwrap();
        let mut coords = Vec::new();
        let mut r = Rng::with_stream(3, 3);
        for _ in 0..50 {
            coords.push(r.uniform(-1.0, 1.0));
            coords.push(r.uniform(-1.0, 1.0));
        }
        let coords = Tensor::new(vec![50, 2], coords).unwrap();
        assert_eq!(
            compose_predict(&field, &coords).data(),
            single.predict(&coords).data()
        );
    }

    #[test]
    fn step_function_between_constant_modules() {
        let arch = FieldArch::sine(1, 0, 1, 1); // single linear layer, w·x + b
        let s = SharedInit::new(arch.clone(), Tensor::vector(vec![0.0, 0.0])).unwrap();
        let regions = vec![
            Region::Box(BoxRegion {
                lo: vec![-1.0],
                hi: vec![0.0],
            }),
            Region::Box(BoxRegion {
                lo: vec![0.0],
                hi: vec![1.0],
            }),
        ];
        let mut field = instantiate(&s, &regions, &[16]).unwrap();
        // Left module outputs 0, right outputs 1 (bias).
        field.modules[1].params.data_mut()[1] = 1.0;
        let coords = Tensor::new(vec![5, 1], vec![-0.8, -0.1, 0.0, 0.1, 0.9]).unwrap();
        let out = compose_predict(&field, &coords);
        // x = 0 sits on the boundary and belongs to the left module.
        assert_eq!(out.data(), &[0.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn expand_preserves_existing_modules() {
        let s = shared(2);
        let half: Vec<Region> = vec![
            Region::Box(BoxRegion {
                lo: vec![-1.0, -1.0],
                hi: vec![0.0, 1.0],
            }),
            Region::Box(BoxRegion {
                lo: vec![0.0, -1.0],
                hi: vec![1.0, 1.0],
            }),
        ];
        let mut field = instantiate(&s, &half, &[8, 8]).unwrap();
        // Adapt module 0 away from shared.
        field.modules[0].params.data_mut()[0] += 1.0;
        let before: Vec<Tensor> = field.modules.iter().map(|m| m.params.clone()).collect();
        // Expansion with an overlapping region must fail…
        let bad = Region::Box(BoxRegion {
            lo: vec![-0.5, -1.0],
            hi: vec![0.5, 1.0],
        });
        assert!(expand(&field, &bad).is_err());
        // …and a disjoint one appends a shared-initialized module.
        let outside = Region::Box(BoxRegion {
            lo: vec![1.0, -1.0],
            hi: vec![1.5, 1.0],
        });
        let grown = expand(&field, &outside).unwrap();
        assert_eq!(grown.n_modules(), 3);
        for (m, b) in grown.modules.iter().zip(&before) {
            assert_eq!(&m.params, b);
        }
        assert_eq!(grown.modules[2].params, s.params);
        assert_eq!(grown.param_total(), 3 * s.arch.param_count());
    }

    #[test]
    fn phase_gate_routes_by_parity() {
        let regions = vec![
            Region::Phase { row: 0, col: 0 },
            Region::Phase { row: 0, col: 1 },
            Region::Phase { row: 1, col: 0 },
            Region::Phase { row: 1, col: 1 },
        ];
        let s = shared(2);
        let field = instantiate(&s, &regions, &[4, 4]).unwrap();
        // Grid index (1, 2) → phase (1, 0) → module 2.
        let y = crate::task::axis_coord(1, 4);
        let x = crate::task::axis_coord(2, 4);
        assert_eq!(field.gate.lookup_one(&[y, x]), 2);
    }
}
