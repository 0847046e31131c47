use super::*;
use crate::dataset::Split;

fn example(history: Vec<ItemIdx>, target: ItemIdx, candidates: Vec<ItemIdx>) -> SequenceExample {
    SequenceExample {
        id: 0,
        user: 0,
        history,
        target,
        candidates,
        split: Split::Train,
        label_ts: 0,
    }
}

/// A d=8, 5-item model with weights large enough that every block does
/// non-trivial work.
pub(crate) fn toy_model(seed: u64) -> PolicyModel {
    let mut m = PolicyModel::init(5, 8, seed);
    m.params_mut().scale(20.0);
    // Layer-norm gains away from 1 so their gradients are exercised.
    let mut r = rng::stream(seed, "gains", 0);
    for t in [Tensor::Ln1Gain, Tensor::Ln2Gain, Tensor::Ln1Bias, Tensor::Ln2Bias, Tensor::B1, Tensor::B2] {
        for x in m.params_mut().get_mut(t) {
            *x = rand::Rng::random_range(&mut r, 0.5..1.5);
        }
    }
    m
}

#[test]
fn candidate_permutation_permutes_scores() {
    let m = PolicyModel::init(30, 16, 1);
    let hist: Vec<ItemIdx> = (0..10).collect();
    let cands = vec![11, 12, 13, 14, 15];
    let s = m.forward_scores(&hist, &cands).unwrap();
    let perm = vec![14, 11, 15, 13, 12];
    let sp = m.forward_scores(&hist, &perm).unwrap();
    for (j, &c) in perm.iter().enumerate() {
        let orig = cands.iter().position(|&x| x == c).unwrap();
        assert_eq!(sp[j], s[orig]);
    }
}

#[test]
fn zero_item_embeddings_give_zero_scores() {
    let mut m = PolicyModel::init(30, 16, 1);
    m.params_mut().get_mut(Tensor::ItemEmb).fill(0.0);
    let s = m.forward_scores(&(0..10).collect::<Vec<_>>(), &[20, 21, 22]).unwrap();
    assert_eq!(s, vec![0.0; 3]);
}

#[test]
fn hand_traced_forward() {
    // d = 2, zero query/key weights (uniform attention), identity value and
    // output projections, no feed-forward contribution, no positions.
    let mut p = ParamSet::zeros(3, 2);
    p.get_mut(Tensor::ItemEmb).copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 2.0, 1.0]);
    p.get_mut(Tensor::Ln1Gain).fill(1.0);
    p.get_mut(Tensor::Ln2Gain).fill(1.0);
    p.get_mut(Tensor::Wv).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    p.get_mut(Tensor::Wo).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    let m = PolicyModel::from_params(p);
    let hist = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 2];
    // LN([1,0]) = [c,-c], LN([0,1]) = [-c,c], LN([2,1]) = [c,-c] with
    // c = 0.5 / sqrt(0.25 + 1e-5). Attention averages: (6 - 4)/10 = 0.2.
    // rep = x_last + [0.2c, -0.2c] = [2 + 0.2c, 1 - 0.2c].
    let c = 0.5 / (0.25f64 + 1e-5).sqrt();
    let expected = [2.0 + 0.2 * c, 1.0 - 0.2 * c, 2.0 * (2.0 + 0.2 * c) + (1.0 - 0.2 * c)];
    let s = m.forward_scores(&hist, &[0, 1, 2]).unwrap();
    for (a, b) in s.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn log_prob_examples() {
    let mut m = PolicyModel::init(25, 8, 2);
    m.params_mut().get_mut(Tensor::ItemEmb).fill(0.0);
    let cands: Vec<ItemIdx> = (5..25).collect();
    let ex = example((0..10).collect(), 5, cands.clone());
    assert!((m.log_prob(&ex, 7).unwrap() - (1.0f64 / 20.0).ln()).abs() < 1e-12);
    assert!((m.log_prob(&ex, 7).unwrap() + 2.9957).abs() < 1e-4);
    assert!(matches!(m.log_prob(&ex, 1), Err(Error::NotACandidate(_))));

    // rep = item_emb[last history item] when the block contributes nothing.
    let mut p = ParamSet::zeros(3, 2);
    p.get_mut(Tensor::ItemEmb).copy_from_slice(&[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
    let m = PolicyModel::from_params(p);
    let ex = example(vec![0; 10], 1, vec![1, 2]);
    let lp = m.log_prob(&ex, 1).unwrap();
    assert!((lp + 0.313_261_687_518_222_8).abs() < 1e-12, "{lp}");
}

#[test]
fn log_probs_normalise() {
    let m = toy_model(9);
    let lp = m.log_probs(&[0, 1, 2, 3, 4, 0, 1, 2, 3, 4], &[0, 1, 2, 3, 4]).unwrap();
    assert!(lp.iter().all(|&l| l <= 0.0));
    let total: f64 = lp.iter().map(|l| l.exp()).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn forward_rejects_bad_inputs() {
    let m = PolicyModel::init(5, 4, 0);
    assert!(matches!(m.forward(&[0, 1, 2]), Err(Error::Shape(_))));
    assert!(matches!(m.forward_scores(&[0; 10], &[9]), Err(Error::UnknownItem(_))));
    assert!(matches!(m.forward(&[7; 10]), Err(Error::UnknownItem(_))));
}

#[test]
fn sft_loss_examples() {
    let mut m = PolicyModel::init(30, 8, 2);
    m.params_mut().get_mut(Tensor::ItemEmb).fill(0.0);
    let ex = example((0..10).collect(), 10, (10..30).collect());
    let (loss, _) = m.sft_loss_and_grad(std::slice::from_ref(&ex)).unwrap();
    assert!((loss - 20f64.ln()).abs() < 1e-12);

    let m = PolicyModel::init(30, 8, 2);
    let (l1, g1) = m.sft_loss_and_grad(std::slice::from_ref(&ex)).unwrap();
    let (l2, g2) = m.sft_loss_and_grad(&[ex.clone(), ex]).unwrap();
    assert!((l1 - l2).abs() < 1e-15);
    for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(m.sft_loss_and_grad(&[]).is_err());
}

/// Central differences on every parameter, compared against backprop.
pub(crate) fn assert_matches_finite_differences<F>(model: &PolicyModel, analytic: &ParamSet, loss: F)
where
    F: Fn(&PolicyModel) -> f64,
{
    let h = 1e-4;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        let orig = probe.params().as_slice()[i];
        probe.params_mut().as_mut_slice()[i] = orig + h;
        let up = loss(&probe);
        probe.params_mut().as_mut_slice()[i] = orig - h;
        let down = loss(&probe);
        probe.params_mut().as_mut_slice()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let a = analytic.as_slice()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
        worst = worst.max(rel);
        assert!(
            rel < 1e-4,
            "param {i} ({}): backprop {a:e} vs finite difference {fd:e}",
            analytic.tensor_of(i).name()
        );
    }
    assert!(worst < 1e-4);
}

#[test]
fn sft_gradient_matches_finite_differences() {
    let m = toy_model(4);
    let batch = vec![
        example(vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4], 2, vec![0, 1, 2, 3, 4]),
        example(vec![4, 3, 2, 1, 0, 4, 3, 2, 1, 0], 0, vec![3, 0, 4]),
    ];
    let (_, g) = m.sft_loss_and_grad(&batch).unwrap();
    assert_matches_finite_differences(&m, &g, |p| p.sft_loss_and_grad(&batch).unwrap().0);
}

#[test]
fn accumulate_is_thread_count_independent() {
    let m = PolicyModel::init(40, 8, 3);
    let batch: Vec<SequenceExample> = (0..37)
        .map(|k| example((k % 20..k % 20 + 10).collect(), 39 - (k % 5), (20..40).collect()))
        .collect();
    let (l1, g1) = m.sft_loss_and_grad(&batch).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (l2, g2) = pool.install(|| m.sft_loss_and_grad(&batch).unwrap());
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1, g2);
}
