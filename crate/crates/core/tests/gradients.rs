mod common;

use common::*;
use tmag::augment::{blend, gen_forward_backward, gen_loss, score_attr, score_graph, AugmentParams, GenCell};
use tmag::dataset::ImplicitMatrix;
use tmag::graph::{build_graph, propagate};
use tmag::linalg::Matrix;
use tmag::model::{
    gradients, hvp, ContrastBatch, LossWeights, ModelConfig, ModelContext, TaskBatch, TaskObjective,
};
use tmag::params::{hvp_eps, Objective, ParamVec};

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in [1, 2, 3] {
        for (name, err) in gradient_errors(seed) {
            assert!(err <= 1e-4, "seed {seed} {name}: relative error {err:e}");
        }
    }
}

#[test]
fn bpr_gradient_at_a_tie() {
    let t = toy(4);
    let cfg = ModelConfig {
        layers: 0,
        weights: LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, tau: 1.0 },
        ..Default::default()
    };
    let ctx = ModelContext::new(&t.graph, &t.user_attr, &t.item_attr, cfg).unwrap();
    let mut p = t.params.clone();
    p.ae_user.w1.scale(0.0);
    p.ae_user.b1.iter_mut().for_each(|b| *b = 0.0);
    let (u, i, j) = (0, 1, 2);
    let row = p.item_emb.row(i).to_vec();
    p.item_emb.row_mut(j).copy_from_slice(&row);
    let batch = TaskBatch { triples: vec![(u, i, j)], ..Default::default() };
    let (l, g) = gradients(&batch, &p, &ctx).unwrap();
    assert!((l.pre - std::f64::consts::LN_2).abs() < 1e-15);
    for (gi, eu) in g.item_emb.row(i).iter().zip(p.user_emb.row(u)) {
        assert!((gi + 0.5 * eu).abs() < 1e-15);
    }
}

#[test]
fn untouched_rows_get_zero_gradient() {
    // users 0,1 with items 0,1 form one component; user 2 and item 2 another
    let m = ImplicitMatrix::from_pairs(3, 3, [(0, 0), (1, 0), (1, 1), (2, 2)]).unwrap();
    let g = build_graph(&m, None).unwrap();
    let mut rng = tmag::rng::seeded(5);
    let ua = random_attr(3, 4, &mut rng);
    let ia = random_attr(3, 4, &mut rng);
    let p = tmag::model::ModelParams::init(
        3,
        3,
        4,
        tmag::autoencoder::AutoencoderParams::init(4, 2, &mut rng),
        tmag::autoencoder::AutoencoderParams::init(4, 2, &mut rng),
        &mut rng,
    );
    let ctx = ModelContext::new(&g, &ua, &ia, ModelConfig { layers: 2, ..Default::default() }).unwrap();
    let batch = TaskBatch {
        triples: vec![(0, 0, 1)],
        gen_cells: vec![GenCell { user: 0, item: 1, target: 0.0 }],
        contrast: ContrastBatch::default(),
    };
    let (_, gb) = gradients(&batch, &p, &ctx).unwrap();
    assert!(gb.user_emb.row(2).iter().all(|v| *v == 0.0));
    assert!(gb.item_emb.row(2).iter().all(|v| *v == 0.0));
    assert!(gb.user_emb.row(0).iter().any(|v| *v != 0.0));
    assert!(gb.ae_user.is_finite() && gb.ae_user.max_abs() == 0.0);
}

#[test]
fn gen_loss_matches_dense_oracle_on_full_grid() {
    let mut rng = tmag::rng::seeded(11);
    let m = random_matrix(3, 4, 0.4, &mut rng);
    let g = build_graph(&m, None).unwrap();
    let e0 = tmag::model::init_rows(7, 3, &mut rng);
    let nodes = propagate(&g, &e0, 2).unwrap().layers.pop().unwrap();
    let item_z = tmag::model::init_rows(4, 2, &mut rng);
    let p = AugmentParams::init(3, 2, &mut rng);
    let alpha = 0.7;

    let cells: Vec<GenCell> = (0..3)
        .flat_map(|u| (0..4).map(move |i| (u, i)))
        .map(|(u, i)| GenCell { user: u, item: i, target: if m.contains(u, i) { 1.0 } else { 0.0 } })
        .collect();
    let got = gen_forward_backward(&cells, &g, &nodes, &item_z, &p, alpha, None).unwrap();

    // dense oracle: ‖E − A‖² / (M·N) from the per-cell score definitions
    let (item_e, _) = {
        let (_, items) = nodes.split_rows(3);
        (items, ())
    };
    let mut scores = Vec::new();
    let mut targets = Vec::new();
    for u in 0..3 {
        for i in 0..4 {
            // the target item is left out of its own neighbourhood
            let nb: Vec<usize> = m.items_of(u).iter().copied().filter(|&j| j != i).collect();
            let e1 = score_graph(&item_e, &p, i, &nb).unwrap_or(0.5);
            let e2 = score_attr(&item_z, &p, i, &nb).unwrap_or(0.5);
            scores.push(blend(e1, e2, alpha));
            targets.push(if m.contains(u, i) { 1.0 } else { 0.0 });
        }
    }
    let dense = gen_loss(&scores, &targets).unwrap();
    assert!((got - dense).abs() < 1e-14, "{got} vs {dense}");
}

#[test]
fn gen_gradient_wrt_channel_matrices() {
    struct GenObj<'a> {
        cells: &'a [GenCell],
        g: &'a tmag::graph::BipartiteGraph,
        nodes: &'a Matrix,
        item_z: &'a Matrix,
    }
    impl Objective<AugmentParams> for GenObj<'_> {
        fn loss(&self, p: &AugmentParams) -> tmag::Result<f64> {
            Ok(gen_forward_backward(self.cells, self.g, self.nodes, self.item_z, p, 0.6, None).unwrap())
        }
        fn gradient(&self, p: &AugmentParams) -> tmag::Result<(f64, AugmentParams)> {
            let mut d_aug = p.zeros_like();
            let mut d_nodes = self.nodes.zeros_like();
            let mut d_z = self.item_z.zeros_like();
            let l = gen_forward_backward(
                self.cells,
                self.g,
                self.nodes,
                self.item_z,
                p,
                0.6,
                Some(tmag::augment::GenGrads {
                    d_nodes: &mut d_nodes,
                    d_item_z: &mut d_z,
                    d_aug: &mut d_aug,
                    scale: 1.0,
                    into_embeddings: false,
                }),
            )
            .unwrap();
            Ok((l, d_aug))
        }
    }
    let t = toy(9);
    let mut rng = tmag::rng::seeded(2);
    let nodes = tmag::model::init_rows(20, 4, &mut rng);
    let item_z = tmag::model::init_rows(12, 3, &mut rng);
    let obj = GenObj { cells: &t.batch.gen_cells, g: &t.graph, nodes: &nodes, item_z: &item_z };
    let (l, g) = obj.gradient(&t.params.aug).unwrap();
    assert!(l >= 0.0);
    let err = relative_error(&g.to_flat(), &finite_difference(&obj, &t.params.aug, 1e-5));
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn contrastive_loss_is_scale_invariant() {
    let t = toy(6);
    let z = t.params.ae_user.encode_table(&t.user_attr).unwrap();
    let mut scaled = z.clone();
    for (r, s) in [(0, 3.5), (3, 0.01), (5, 17.0)] {
        scaled.row_mut(r).iter_mut().for_each(|v| *v *= s);
    }
    for mode in [tmag::model::InfoNceDenominator::Literal, tmag::model::InfoNceDenominator::WithPositive] {
        let a = tmag::model::contrastive_loss(&z, &t.batch.contrast, 0.2, mode);
        let b = tmag::model::contrastive_loss(&scaled, &t.batch.contrast, 0.2, mode);
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn breakdown_sums_to_total() {
    let t = toy(7);
    let ctx = ModelContext::new(&t.graph, &t.user_attr, &t.item_attr, ModelConfig { layers: 2, ..Default::default() })
        .unwrap();
    let l = tmag::model::total_loss(&t.batch, &t.params, &ctx).unwrap();
    let w = LossWeights::default();
    let sum = l.pre + w.lambda1 * l.gen + w.lambda2 * l.mi + w.lambda3 * l.reg;
    assert!((sum - l.total).abs() <= 1e-12);
}

#[test]
fn joint_loss_with_zero_params_is_ln2() {
    let t = toy(8);
    let cfg = ModelConfig { layers: 2, ..Default::default() };
    let ctx = ModelContext::new(&t.graph, &t.user_attr, &t.item_attr, cfg).unwrap();
    let mut p = t.params.zeros_like();
    // keep the autoencoders so shapes are valid; zeroed codes contribute nothing
    p.ae_user = t.params.ae_user.zeros_like();
    let batch = TaskBatch { triples: vec![t.batch.triples[0]], ..Default::default() };
    let l = tmag::model::total_loss(&batch, &p, &ctx).unwrap();
    assert!((l.total - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn model_hvp_is_linear_and_zero_safe() {
    let t = toy(10);
    let ctx = ModelContext::new(&t.graph, &t.user_attr, &t.item_attr, ModelConfig { layers: 2, ..Default::default() })
        .unwrap();
    let obj = TaskObjective { ctx: &ctx, batch: &t.batch };
    let (_, v) = obj.gradient(&t.params).unwrap();
    let eps = hvp_eps(&t.params, 1e-3);
    let hv = hvp(&t.batch, &t.params, &ctx, &v, eps).unwrap();
    let mut v2 = v.clone();
    v2.scale(2.0);
    let hv2 = hvp(&t.batch, &t.params, &ctx, &v2, eps).unwrap();
    let mut twice = hv.clone();
    twice.scale(2.0);
    assert!(relative_error(&twice.to_flat(), &hv2.to_flat()) < 1e-6);
    let zero = hvp(&t.batch, &t.params, &ctx, &v.zeros_like(), eps).unwrap();
    assert_eq!(zero.max_abs(), 0.0);
}

#[test]
fn mf_gradient_matches_finite_differences() {
    use tmag::baseline::{mf_loss_and_grad, MfParams};
    struct MfObj(Vec<(usize, usize, usize)>);
    impl Objective<MfParams> for MfObj {
        fn loss(&self, p: &MfParams) -> tmag::Result<f64> {
            Ok(mf_loss_and_grad(p, &self.0, 0.01).0)
        }
        fn gradient(&self, p: &MfParams) -> tmag::Result<(f64, MfParams)> {
            Ok(mf_loss_and_grad(p, &self.0, 0.01))
        }
    }
    let mut rng = tmag::rng::seeded(21);
    let p = MfParams::init(5, 7, 4, &mut rng);
    let obj = MfObj(vec![(0, 1, 2), (0, 3, 2), (4, 6, 0), (2, 5, 1)]);
    let (_, g) = obj.gradient(&p).unwrap();
    let err = relative_error(&g.to_flat(), &finite_difference(&obj, &p, 1e-4));
    assert!(err <= 1e-4, "{err:e}");
}
