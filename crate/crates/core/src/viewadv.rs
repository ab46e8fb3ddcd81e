//! View-adversarial components: gradient reversal, the per-frame view
//! classifier and its loss, and per-class under-sampling of frames.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autograd::{Binder, Graph, Mat, ParamGroup, Var};
use crate::captioner::CaptionModel;
use crate::data::ViewLabel;
use crate::error::{Error, Result};

const LAYERS: [&str; 3] = ["cls.l1", "cls.l2", "cls.l3"];

/// Gradient reversal: identity forward, gradients scaled by `-lambda`.
pub fn grl(x: Var<'_>, lambda: f64) -> Result<Var<'_>> {
    if !(lambda >= 0.0) {
        return Err(Error::Validation(format!("reversal strength must be >= 0, got {lambda}")));
    }
    Ok(x.reverse_grad(lambda))
}

/// Replaces any existing view classifier with a freshly initialized
/// three-layer MLP (`d_model -> hidden -> hidden -> classes`). Converter
/// and captioner parameters are left untouched.
pub fn reinit_classifier(model: &mut CaptionModel, classes: usize, hidden: usize, rng: &mut impl Rng) -> Result<()> {
    if !(2..=3).contains(&classes) {
        return Err(Error::Validation(format!("view classifier needs 2 or 3 classes, got {classes}")));
    }
    if hidden == 0 {
        return Err(Error::Validation("classifier hidden width must be positive".into()));
    }
    model.params.remove_group(ParamGroup::Classifier);
    let d = model.config.d_model;
    let dims = [(d, hidden), (hidden, hidden), (hidden, classes)];
    for (name, (i, o)) in LAYERS.iter().zip(dims) {
        model.params.insert_xavier(&format!("{name}.w"), i, o, ParamGroup::Classifier, rng);
        model
            .params
            .insert(format!("{name}.b"), Mat::zeros((1, o)), ParamGroup::Classifier);
    }
    model.classifier_classes = Some(classes);
    Ok(())
}

/// Classifier logits for each row of `frames`.
pub fn classifier_logits<'g>(b: &Binder<'g, '_>, frames: Var<'g>) -> Var<'g> {
    let mut h = frames;
    for (i, name) in LAYERS.iter().enumerate() {
        h = h.matmul(b.p(&format!("{name}.w"))).add_row(b.p(&format!("{name}.b")));
        if i + 1 < LAYERS.len() {
            h = h.relu();
        }
    }
    h
}

/// Mean frame-wise cross-entropy of the classifier against view labels.
pub fn adv_loss<'g>(model: &CaptionModel, b: &Binder<'g, '_>, frames: Var<'g>, labels: &[ViewLabel]) -> Result<Var<'g>> {
    let k = model
        .classifier_classes
        .ok_or_else(|| Error::Validation("no view classifier attached".into()))?;
    if frames.dim().0 != labels.len() {
        return Err(Error::Shape(format!("{} frames but {} view labels", frames.dim().0, labels.len())));
    }
    if let Some(bad) = labels.iter().find(|l| l.index() >= k) {
        return Err(Error::Validation(format!("view label {bad:?} outside the classifier's {k} classes")));
    }
    let targets: Vec<Option<usize>> = labels.iter().map(|l| Some(l.index())).collect();
    Ok(classifier_logits(b, frames).cross_entropy(&targets))
}

/// Plain-value adversarial loss of `frames` (no reversal).
pub fn adv_loss_value(model: &CaptionModel, frames: &Mat, labels: &[ViewLabel]) -> Result<f64> {
    let g = Graph::new();
    let b = Binder::new(&g, &model.params);
    Ok(adv_loss(model, &b, g.constant(frames.clone()), labels)?.item())
}

/// Indices of a class-balanced subset: every present class is sampled
/// without replacement down to the smallest class count. Indices are
/// returned in ascending order.
pub fn balance_views(labels: &[ViewLabel], rng: &mut impl Rng) -> Vec<usize> {
    let mut by_class: BTreeMap<ViewLabel, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let Some(min) = by_class.values().map(Vec::len).min() else {
        return Vec::new();
    };
    let mut keep = Vec::with_capacity(min * by_class.len());
    for idx in by_class.values_mut() {
        idx.shuffle(rng);
        keep.extend_from_slice(&idx[..min]);
    }
    keep.sort_unstable();
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::ModelConfig;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use ViewLabel::*;

    fn model(classes: usize) -> CaptionModel {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = ModelConfig {
            d_model: 4,
            heads: 1,
            ffn_dim: 4,
            n_queries: 2,
            input_widths: vec![4],
            ..ModelConfig::default()
        };
        let mut m = CaptionModel::new(cfg, 6, &mut rng).unwrap();
        reinit_classifier(&mut m, classes, 4, &mut rng).unwrap();
        m
    }

    #[test]
    fn grl_forward_identity_backward_negated() {
        let g = Graph::new();
        let x = g.variable(array![[1.0, -2.0]]);
        let y = grl(x, 1.0).unwrap();
        assert_eq!(*y.value(), *x.value());
        let grads = g.backward(y.sum());
        assert_eq!(grads.get(x).unwrap(), &array![[-1.0, -1.0]]);
        let w = g.constant(array![[1.0, -2.0]]);
        let grads = g.backward(grl(x, 1.0).unwrap().mul(w).sum());
        assert_eq!(grads.get(x).unwrap(), &array![[-1.0, 2.0]]);
        assert!(grl(x, -0.1).is_err());
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let mut m = model(2);
        for n in ["cls.l3.w", "cls.l3.b"] {
            m.params.get_mut(n).unwrap().fill(0.0);
        }
        let frames = Mat::from_elem((3, 4), 0.3);
        let l = adv_loss_value(&m, &frames, &[Exo, EgoLike, Exo]).unwrap();
        assert_abs_diff_eq!(l, 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn scripted_logits_mean_ce() {
        let mut m = model(3);
        // Final layer reads the first hidden unit only; make hidden = relu(x).
        m.params.get_mut("cls.l1.w").unwrap().assign(&Mat::eye(4));
        m.params.get_mut("cls.l2.w").unwrap().assign(&Mat::eye(4));
        m.params.get_mut("cls.l1.b").unwrap().fill(0.0);
        m.params.get_mut("cls.l2.b").unwrap().fill(0.0);
        let mut w3 = Mat::zeros((4, 3));
        w3[[0, 0]] = 1.0;
        w3[[1, 1]] = 1.0;
        w3[[2, 2]] = 1.0;
        m.params.get_mut("cls.l3.w").unwrap().assign(&w3);
        m.params.get_mut("cls.l3.b").unwrap().fill(0.0);
        let frames = array![[2.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]];
        let labels = [Exo, Exo, Ego];
        let l = adv_loss_value(&m, &frames, &labels).unwrap();
        let ce = |z: [f64; 3], t: usize| z.iter().map(|v| v.exp()).sum::<f64>().ln() - z[t];
        let expect = (ce([2.0, 0.0, 0.0], 0) + ce([0.0, 1.0, 0.0], 0) + ce([0.0; 3], 2)) / 3.0;
        assert_abs_diff_eq!(l, expect, epsilon = 1e-12);
    }

    #[test]
    fn label_outside_classes_is_an_error() {
        let m = model(2);
        let frames = Mat::zeros((1, 4));
        assert!(adv_loss_value(&m, &frames, &[Ego]).is_err());
    }

    #[test]
    fn reinit_changes_only_classifier() {
        let mut m = model(2);
        let before = m.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        reinit_classifier(&mut m, 3, 4, &mut rng).unwrap();
        assert_eq!(m.classifier_classes, Some(3));
        assert_eq!(m.params.get("cls.l3.w").unwrap().dim(), (4, 3));
        for p in before.params.params().iter().filter(|p| p.group == ParamGroup::Model) {
            assert_eq!(m.params.get(&p.name).unwrap(), &p.value);
        }
        let mut again = before.clone();
        reinit_classifier(&mut again, 3, 4, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(again, m);
    }

    fn counts(labels: &[ViewLabel], idx: &[usize]) -> BTreeMap<ViewLabel, usize> {
        let mut c = BTreeMap::new();
        for &i in idx {
            *c.entry(labels[i]).or_insert(0) += 1;
        }
        c
    }

    #[test]
    fn balance_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels: Vec<ViewLabel> = std::iter::repeat_n(Exo, 50).chain(std::iter::repeat_n(EgoLike, 10)).collect();
        let idx = balance_views(&labels, &mut rng);
        assert_eq!(counts(&labels, &idx), BTreeMap::from([(Exo, 10), (EgoLike, 10)]));

        let even = [Exo, EgoLike, Exo, EgoLike];
        assert_eq!(balance_views(&even, &mut rng), vec![0, 1, 2, 3]);

        let labels: Vec<ViewLabel> = [(Exo, 7), (EgoLike, 3), (Ego, 5)]
            .iter()
            .flat_map(|&(l, n)| std::iter::repeat_n(l, n))
            .collect();
        let a = balance_views(&labels, &mut ChaCha8Rng::seed_from_u64(5));
        let b = balance_views(&labels, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(counts(&labels, &a), BTreeMap::from([(Exo, 3), (EgoLike, 3), (Ego, 3)]));
    }
}
