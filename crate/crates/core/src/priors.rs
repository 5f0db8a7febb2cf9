//! Learnable label-specific priors and query initialization.
//!
//! One bank of object-class vectors and one of verb-class vectors serve three
//! consumers from the same storage: inference-query initialization (a learned
//! linear combination), denoising-query encoding (select / select-and-sum),
//! and the verb-prior cross-attention keys.

use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::Node;
use crate::nn::{Fwd, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{CoreError, Result};

/// Std-dev for bank and coefficient initialization.
pub const PRIOR_INIT_STD: f64 = 0.02;

/// Object and verb prior vectors: `t_obj` is (object classes × D),
/// `t_verb` is (verb classes × D).
pub struct LabelEmbeddingBank {
    pub t_obj: ParamId,
    pub t_verb: ParamId,
    pub num_obj_classes: usize,
    pub num_verb_classes: usize,
    pub dim: usize,
}

impl LabelEmbeddingBank {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        num_obj_classes: usize,
        num_verb_classes: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Self {
        let t_obj = ps.add(
            alloc::format!("{name}.t_obj"),
            Tensor::randn(num_obj_classes, dim, PRIOR_INIT_STD, rng),
        );
        let t_verb = ps.add(
            alloc::format!("{name}.t_verb"),
            Tensor::randn(num_verb_classes, dim, PRIOR_INIT_STD, rng),
        );
        LabelEmbeddingBank {
            t_obj,
            t_verb,
            num_obj_classes,
            num_verb_classes,
            dim,
        }
    }

    /// Row `class_index` of the object bank.
    pub fn select_object_vector(&self, ps: &ParamSet, class_index: usize) -> Result<Vec<f64>> {
        if class_index >= self.num_obj_classes {
            return Err(CoreError::IndexOutOfRange {
                index: class_index,
                bound: self.num_obj_classes,
            });
        }
        Ok(ps.get(self.t_obj).row(class_index).to_vec())
    }

    /// Element-wise sum of verb-bank rows over a non-empty index set.
    pub fn encode_verb_multilabel(&self, ps: &ParamSet, indices: &[usize]) -> Result<Vec<f64>> {
        if indices.is_empty() {
            return Err(CoreError::EmptySet("verb index set"));
        }
        let t = ps.get(self.t_verb);
        let mut acc = alloc::vec![0.0; self.dim];
        for &i in indices {
            if i >= self.num_verb_classes {
                return Err(CoreError::IndexOutOfRange {
                    index: i,
                    bound: self.num_verb_classes,
                });
            }
            for (a, v) in acc.iter_mut().zip(t.row(i)) {
                *a += v;
            }
        }
        Ok(acc)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        alloc::vec![self.t_obj, self.t_verb]
    }
}

/// Learned mixing coefficients turning the banks into inference queries.
pub struct CoefficientMatrices {
    pub a_obj: ParamId,
    pub a_verb: ParamId,
    pub num_queries: usize,
}

impl CoefficientMatrices {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        num_queries: usize,
        num_obj_classes: usize,
        num_verb_classes: usize,
        rng: &mut Rng,
    ) -> Self {
        CoefficientMatrices {
            a_obj: ps.add(
                alloc::format!("{name}.a_obj"),
                Tensor::randn(num_queries, num_obj_classes, PRIOR_INIT_STD, rng),
            ),
            a_verb: ps.add(
                alloc::format!("{name}.a_verb"),
                Tensor::randn(num_queries, num_verb_classes, PRIOR_INIT_STD, rng),
            ),
            num_queries,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        alloc::vec![self.a_obj, self.a_verb]
    }
}

/// Validate that bank and coefficients agree on class counts.
pub fn check_query_init_shapes(
    bank: &LabelEmbeddingBank,
    coeffs: &CoefficientMatrices,
    ps: &ParamSet,
) -> Result<()> {
    let a_obj = ps.get(coeffs.a_obj);
    let a_verb = ps.get(coeffs.a_verb);
    if a_obj.cols() != bank.num_obj_classes || a_verb.cols() != bank.num_verb_classes {
        return Err(CoreError::ShapeMismatch(String::from(
            "coefficient columns must equal bank class counts",
        )));
    }
    if a_obj.rows() != coeffs.num_queries || a_verb.rows() != coeffs.num_queries {
        return Err(CoreError::ShapeMismatch(String::from(
            "coefficient rows must equal the query count",
        )));
    }
    Ok(())
}

/// Inference queries `A_obj·t_obj + A_verb·t_verb`, rebuilt from the current
/// parameters on every call so gradients reach the banks.
pub fn init_inference_queries<'g>(
    fwd: &Fwd<'g>,
    bank: &LabelEmbeddingBank,
    coeffs: &CoefficientMatrices,
) -> Result<Node<'g>> {
    check_query_init_shapes(bank, coeffs, fwd.params())?;
    let q_obj = fwd.param(coeffs.a_obj).matmul(fwd.param(bank.t_obj));
    let q_verb = fwd.param(coeffs.a_verb).matmul(fwd.param(bank.t_verb));
    Ok(q_obj.add(q_verb))
}
