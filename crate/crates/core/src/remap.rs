//! Parameter remapping from a trained teacher onto any smaller config of the same search space.
//!
//! Depth first: block `o` of a student stage takes block `o` of the teacher stage. Width second:
//! every tensor is cut to its leading `[0..k)` range along each axis, so output channels, input
//! channels, and normalization moments all keep their lowest indices. Nothing is synthesized.

use ndarray::Slice;

use crate::error::{Error, Result};
use crate::nn::{layout, ParamTable, StagedNetwork};
use crate::search_space::{ArchConfig, SearchSpaceSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Feasibility {
    pub feasible: bool,
    pub violations: Vec<String>,
}

/// Checks stage by stage that the student is no deeper and no wider than the teacher.
pub fn validate_remap_feasibility(
    spec: &SearchSpaceSpec,
    teacher: &ArchConfig,
    student: &ArchConfig,
) -> Feasibility {
    let mut violations = Vec::new();
    let (tw, sw) = (teacher.widths(spec), student.widths(spec));
    if tw.len() != sw.len() {
        violations.push(format!("teacher has {} stages, student {}", tw.len(), sw.len()));
    }
    for (stage, (t, s)) in tw.iter().zip(&sw).enumerate() {
        if s.len() > t.len() {
            violations.push(format!(
                "stage {stage}: student depth {} exceeds teacher depth {}",
                s.len(),
                t.len()
            ));
        }
        for (layer, (&tk, &sk)) in t.iter().zip(s).enumerate() {
            if sk > tk {
                violations.push(format!(
                    "stage {stage} layer {layer}: student width {sk} exceeds teacher width {tk}"
                ));
            }
        }
    }
    Feasibility { feasible: violations.is_empty(), violations }
}

/// Student parameter table sliced out of the teacher's.
pub fn remap(teacher: &StagedNetwork, student: &ArchConfig) -> Result<ParamTable> {
    let spec = &teacher.spec;
    student.validate(spec)?;
    let check = validate_remap_feasibility(spec, &teacher.config, student);
    if !check.feasible {
        return Err(Error::Remap(check.violations.join("; ")));
    }
    let mut out = ParamTable::default();
    for (key, shape) in layout(spec, student, teacher.num_classes) {
        let src = teacher.params.get(&key).map_err(|_| {
            Error::Shape(format!("teacher lacks {key} required by the student layout"))
        })?;
        if src.ndim() != shape.len() || src.shape().iter().zip(&shape).any(|(t, s)| s > t) {
            return Err(Error::Shape(format!(
                "{key}: student shape {shape:?} does not fit teacher {:?}",
                src.shape()
            )));
        }
        let slice = src.slice_each_axis(|ax| Slice::from(0..shape[ax.axis.index()]));
        out.insert(key, slice.as_standard_layout().into_owned());
    }
    Ok(out)
}

/// Remapped student as a runnable network.
pub fn remap_network(teacher: &StagedNetwork, student: &ArchConfig) -> Result<StagedNetwork> {
    let params = remap(teacher, student)?;
    StagedNetwork::from_params(&teacher.spec, student, teacher.num_classes, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{largest, sample};

    #[test]
    fn identity_remap_is_bit_identical() {
        let spec = SearchSpaceSpec::mini();
        let teacher = StagedNetwork::build(&spec, &largest(&spec), 3, 1).unwrap();
        assert_eq!(remap(&teacher, &teacher.config).unwrap(), teacher.params);
    }

    #[test]
    fn deeper_student_is_rejected_with_stage() {
        let spec = SearchSpaceSpec::mini();
        let small = ArchConfig { depths: vec![1, 1], ratios: vec![vec![1.0], vec![1.0]] };
        let big = ArchConfig { depths: vec![1, 2], ratios: vec![vec![1.0], vec![0.5, 1.0]] };
        let teacher = StagedNetwork::build(&spec, &small, 2, 0).unwrap();
        let err = remap(&teacher, &big).unwrap_err().to_string();
        assert!(err.contains("stage 1"), "{err}");
        assert!(validate_remap_feasibility(&spec, &small, &small).feasible);
        assert!(!validate_remap_feasibility(&spec, &small, &big).feasible);
    }

    #[test]
    fn wider_layer_is_named() {
        let spec = SearchSpaceSpec::mini();
        let t = ArchConfig { depths: vec![2, 1], ratios: vec![vec![0.5, 1.0], vec![1.0]] };
        let s = ArchConfig { depths: vec![2, 1], ratios: vec![vec![0.75, 1.0], vec![1.0]] };
        let f = validate_remap_feasibility(&spec, &t, &s);
        assert_eq!(f.violations, vec!["stage 0 layer 0: student width 6 exceeds teacher width 4"]);
    }

    #[test]
    fn sampled_students_remap_from_largest() {
        let spec = SearchSpaceSpec::standard();
        let spec = SearchSpaceSpec { input_shape: [3, 8, 8], base_widths: vec![8, 8, 16, 16], ..spec };
        let teacher = StagedNetwork::build(&spec, &largest(&spec), 4, 9).unwrap();
        for seed in 0..10 {
            let c = sample(&spec, seed).unwrap();
            let net = remap_network(&teacher, &c).unwrap();
            assert_eq!(net.config, c);
        }
    }
}
