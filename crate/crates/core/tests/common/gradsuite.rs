//! Gradient checks for every differentiable graph operation and for the
//! full micro model.

use caplab::model::{AudioLanguageModel, ModelConfig, Towers};
use caplab::objectives::{contrastive_loss, inverse_temperature, mixed_caption_loss, Memory, MixedBatchPlan};
use caplab::tensor::{Graph, RowPlan, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_model, check_op, example};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>);

fn cases() -> Vec<Case> {
    let combine = RowPlan {
        rows: vec![vec![(0, 0.5), (2, -1.25)], vec![], vec![(1, 2.0), (1, 0.5), (3, 1.0)]],
    };
    vec![
        ("matmul", vec![rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)], Box::new(|g, v| g.matmul(v[0], v[1]).unwrap())),
        ("transpose", vec![rand_t(&[3, 4], 3)], Box::new(|g, v| g.transpose(v[0]).unwrap())),
        ("add", vec![rand_t(&[2, 3], 4), rand_t(&[2, 3], 5)], Box::new(|g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", vec![rand_t(&[2, 3], 6), rand_t(&[2, 3], 7)], Box::new(|g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul", vec![rand_t(&[2, 3], 8), rand_t(&[2, 3], 9)], Box::new(|g, v| g.mul(v[0], v[1]).unwrap())),
        ("add_row", vec![rand_t(&[3, 4], 10), rand_t(&[4], 11)], Box::new(|g, v| g.add_row(v[0], v[1]).unwrap())),
        ("scale", vec![rand_t(&[2, 3], 12)], Box::new(|g, v| g.scale(v[0], -1.7))),
        ("mul_scalar", vec![rand_t(&[2, 3], 13), rand_t(&[1], 14)], Box::new(|g, v| g.mul_scalar(v[0], v[1]).unwrap())),
        ("exp", vec![rand_t(&[2, 3], 15)], Box::new(|g, v| g.exp(v[0]))),
        ("gelu", vec![rand_t(&[3, 3], 16)], Box::new(|g, v| g.gelu(v[0]))),
        ("softmax_last", vec![rand_t(&[3, 4], 17)], Box::new(|g, v| g.softmax_last(v[0]))),
        ("softmax_axis0", vec![rand_t(&[3, 4], 18)], Box::new(|g, v| g.softmax(v[0], 0).unwrap())),
        (
            "softmax_masked",
            vec![rand_t(&[2, 4], 19)],
            Box::new(|g, v| g.softmax_masked(v[0], Some(&[true, false, true, true, false, true, true, true])).unwrap()),
        ),
        (
            "cross_entropy",
            vec![rand_t(&[4, 5], 20)],
            Box::new(|g, v| g.cross_entropy(v[0], &[1, 99, 4, 0], 99).unwrap()),
        ),
        (
            "cross_entropy_sorted",
            vec![rand_t(&[3, 5], 21)],
            Box::new(|g, v| g.cross_entropy_sorted(v[0], &[2, 0, 4], usize::MAX).unwrap()),
        ),
        (
            "bce_with_logits",
            vec![rand_t(&[2, 3], 22)],
            Box::new(|g, v| {
                let y = Tensor::new(vec![2, 3], vec![1.0, 0.0, 0.3, 1.0, 1.0, 0.0]).unwrap();
                g.bce_with_logits(v[0], &y).unwrap()
            }),
        ),
        (
            "layer_norm",
            vec![rand_t(&[3, 5], 23), rand_t(&[5], 24), rand_t(&[5], 25)],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap()),
        ),
        ("slice_cols", vec![rand_t(&[3, 5], 26)], Box::new(|g, v| g.slice_cols(v[0], 1, 3).unwrap())),
        (
            "concat_cols",
            vec![rand_t(&[2, 2], 27), rand_t(&[2, 3], 28)],
            Box::new(|g, v| g.concat_cols(&[v[0], v[1]]).unwrap()),
        ),
        (
            "concat_rows",
            vec![rand_t(&[2, 3], 29), rand_t(&[1, 3], 30)],
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]]).unwrap()),
        ),
        (
            "row_combine",
            vec![rand_t(&[4, 3], 31)],
            Box::new(move |g, v| g.row_combine(v[0], combine.clone()).unwrap()),
        ),
        ("gather_rows", vec![rand_t(&[4, 3], 32)], Box::new(|g, v| g.gather_rows(v[0], &[3, 0, 3, 1]).unwrap())),
        ("sum_all", vec![rand_t(&[2, 3], 33)], Box::new(|g, v| g.sum_all(v[0]))),
        ("mean_all", vec![rand_t(&[2, 3], 34)], Box::new(|g, v| g.mean_all(v[0]))),
        ("l2_normalize_rows", vec![rand_t(&[3, 4], 35)], Box::new(|g, v| g.l2_normalize_rows(v[0]).unwrap())),
        ("reshape", vec![rand_t(&[2, 6], 36)], Box::new(|g, v| g.reshape(v[0], &[3, 4]).unwrap())),
        (
            "inverse_temperature",
            vec![Tensor::new(vec![1], vec![0.07f64.ln()]).unwrap()],
            Box::new(|g, v| inverse_temperature(g, v[0])),
        ),
        (
            "contrastive_loss",
            vec![rand_t(&[3, 4], 37), rand_t(&[3, 4], 38), Tensor::new(vec![1], vec![1.0 / 0.2]).unwrap()],
            Box::new(|g, v| contrastive_loss(g, v[0], v[1], v[2]).unwrap()),
        ),
    ]
}

/// Worst relative error per operation.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .map(|(name, inputs, build)| (name, check_op(&inputs, build)))
        .collect()
}

/// Both objectives through the micro model with every tower present:
/// contrastive loss over two clips plus a mixed captioning loss with one
/// autoregressive and one parallel sample.
pub fn end_to_end_error() -> (f64, usize) {
    let model = AudioLanguageModel::new(ModelConfig::micro(300), Towers::BOTH, 11).unwrap();
    let batch = [example("a", 24, 1, &[270, 281, 299]), example("b", 19, 2, &[265, 288])];
    let build = |g: &mut Graph<f64>| -> Var {
        let mut za = Vec::new();
        let mut zt = Vec::new();
        let mut memories = Vec::new();
        for ex in &batch {
            let enc = model.audio_graph(g, &ex.mel, ex.valid).unwrap();
            za.push(model.audio_clip_graph(g, &enc).unwrap());
            zt.push(model.text_clip_graph(g, &ex.tokens).unwrap());
            memories.push(Memory {
                frames: enc.frames,
                mask: enc.mask,
            });
        }
        let a = g.concat_rows(&za).unwrap();
        let t = g.concat_rows(&zt).unwrap();
        let log_tau = g.param("head/log_tau", model.params.get("head/log_tau").unwrap());
        let inv_tau = inverse_temperature(g, log_tau);
        let contrastive = contrastive_loss(g, a, t, inv_tau).unwrap();
        let targets: Vec<Vec<u32>> = batch.iter().map(|e| e.tokens.clone()).collect();
        let plan = MixedBatchPlan {
            parallel: vec![false, true],
        };
        let (caption, _) = mixed_caption_loss(g, &model, &memories, &targets, &plan).unwrap();
        g.add(contrastive, caption).unwrap()
    };
    check_model(&model, 2, 5, build)
}
