use rand::Rng as _;
use rehearsal_core::methods::{objective, ParamPenalties, ReplayDraw, ReplaySet};
use rehearsal_core::netcore::{backward, cross_entropy, cross_entropy_grad, forward, softmax};
use rehearsal_core::regularizers::{em_grad_wrt_logits, em_loss, im_grad_wrt_logits, im_loss};
use rehearsal_core::rng::Rng;
use rehearsal_core::{
    DenseMatrix, EwcState, Method, MlpParams, RegTarget, Regularizer, RegularizerKind, SiState,
};

use super::{fd_worst, random_labels, random_matrix, random_net, safe_inputs};

pub const COORDS: usize = 25;

/// Worst relative error of one named loss on one net.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub loss: String,
    pub worst: f64,
}

fn theta_loss(params: &MlpParams, f: impl Fn(&MlpParams) -> f64) -> impl Fn(&[f64]) -> f64 {
    let params = params.clone();
    move |flat| f(&params.with_flat(flat).unwrap())
}

fn logit_space(
    rng: &mut Rng,
    params: &MlpParams,
    x: &DenseMatrix,
    loss: impl Fn(&DenseMatrix) -> f64,
    upstream: impl Fn(&DenseMatrix) -> DenseMatrix,
) -> f64 {
    let cache = forward(params, x).unwrap();
    let analytic = backward(params, &cache, &upstream(&cache.logits))
        .unwrap()
        .flatten();
    let x = x.clone();
    let f = theta_loss(params, move |p| loss(&forward(p, &x).unwrap().logits));
    fd_worst(rng, &params.flatten(), &analytic, COORDS, f)
}

fn ce(
    labels: Vec<usize>,
) -> (
    impl Fn(&DenseMatrix) -> f64,
    impl Fn(&DenseMatrix) -> DenseMatrix,
) {
    let l2 = labels.clone();
    (
        move |z: &DenseMatrix| cross_entropy(&softmax(z).unwrap(), &labels).unwrap(),
        move |z: &DenseMatrix| cross_entropy_grad(&softmax(z).unwrap(), &l2).unwrap(),
    )
}

/// Run every differentiable loss on `nets` random nets of at most
/// `max_params` parameters.
pub fn gradient_suite(seed: u64, nets: usize, max_params: usize) -> Vec<GradCheck> {
    let mut rng = super::rng(seed);
    let mut out = Vec::new();
    for _ in 0..nets {
        let params = random_net(&mut rng, max_params);
        out.extend(checks_for_net(&mut rng, &params));
    }
    out
}

pub fn checks_for_net(rng: &mut Rng, params: &MlpParams) -> Vec<GradCheck> {
    let k = params.num_classes();
    let b = rng.random_range(2..=6);
    let r1 = rng.random_range(1..=4);
    let r2 = rng.random_range(1..=4);
    let all = safe_inputs(rng, params, b + r1 + r2);
    let x = all.slice_rows(0, b);
    let y = random_labels(rng, b, k);
    let replay1 = ReplaySet {
        features: all.slice_rows(b, b + r1),
        labels: random_labels(rng, r1, k),
        logits: Some(random_matrix(rng, r1, k, 2.0)),
    };
    let replay2 = ReplaySet {
        features: all.slice_rows(b + r1, b + r1 + r2),
        labels: random_labels(rng, r2, k),
        logits: None,
    };
    let mut checks = Vec::new();
    let mut push = |loss: &str, worst: f64| {
        checks.push(GradCheck {
            loss: loss.to_string(),
            worst,
        })
    };

    let (f, g) = ce(y.clone());
    push("ce", logit_space(rng, params, &x, f, g));
    push(
        "im",
        logit_space(
            rng,
            params,
            &x,
            |z| im_loss(&softmax(z).unwrap()),
            |z| im_grad_wrt_logits(&softmax(z).unwrap()),
        ),
    );
    let same = DenseMatrix::from_rows(&vec![x.row(0).to_vec(); b]).unwrap();
    push(
        "im_identical_rows",
        logit_space(
            rng,
            params,
            &same,
            |z| im_loss(&softmax(z).unwrap()),
            |z| im_grad_wrt_logits(&softmax(z).unwrap()),
        ),
    );
    push(
        "em",
        logit_space(
            rng,
            params,
            &x,
            |z| em_loss(&softmax(z).unwrap()),
            |z| em_grad_wrt_logits(&softmax(z).unwrap()),
        ),
    );

    let n = params.num_params();
    let theta = params.flatten();
    let anchor: Vec<f64> = theta
        .iter()
        .map(|t| t + rng.random_range(-0.5..0.5))
        .collect();
    let fisher: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
    let ewc = EwcState::from_parts(anchor.clone(), fisher, rng.random_range(0.1..3.0)).unwrap();
    let analytic = ewc.penalty_grad(params).unwrap().flatten();
    let e = ewc.clone();
    push(
        "ewc",
        fd_worst(
            rng,
            &theta,
            &analytic,
            COORDS,
            theta_loss(params, move |p| e.penalty(p).unwrap()),
        ),
    );

    let importance: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
    let si = SiState::new(
        &params.with_flat(&anchor).unwrap(),
        0.1,
        rng.random_range(0.1..3.0),
    )
    .unwrap()
    .with_importance(importance)
    .unwrap();
    let analytic = si.penalty_grad(params).unwrap().flatten();
    let s = si.clone();
    push(
        "si",
        fd_worst(
            rng,
            &theta,
            &analytic,
            COORDS,
            theta_loss(params, move |p| s.penalty(p).unwrap()),
        ),
    );

    let alpha = rng.random_range(0.1..1.0);
    let beta = rng.random_range(0.1..1.0);
    let draw_one = ReplayDraw {
        first: Some(replay1.clone()),
        second: None,
    };
    let draw_two = ReplayDraw {
        first: Some(replay1.clone()),
        second: Some(replay2.clone()),
    };
    let composites: Vec<(String, Method, Regularizer, RegTarget, &ReplayDraw)> = vec![
        (
            "er".into(),
            Method::er(),
            Regularizer::none(),
            RegTarget::Ct,
            &draw_one,
        ),
        (
            "der".into(),
            Method::der(alpha),
            Regularizer::none(),
            RegTarget::Ct,
            &draw_one,
        ),
        (
            "der++".into(),
            Method::derpp(alpha, beta),
            Regularizer::none(),
            RegTarget::Ct,
            &draw_two,
        ),
        (
            "er+im/ct".into(),
            Method::er(),
            Regularizer::new(RegularizerKind::Im, 0.5).unwrap(),
            RegTarget::Ct,
            &draw_one,
        ),
        (
            "er+im/bf".into(),
            Method::er(),
            Regularizer::new(RegularizerKind::Im, 0.5).unwrap(),
            RegTarget::Bf,
            &draw_one,
        ),
        (
            "der++ +im/all".into(),
            Method::derpp(alpha, beta),
            Regularizer::new(RegularizerKind::Im, 0.3).unwrap(),
            RegTarget::All,
            &draw_two,
        ),
        (
            "der+em/ct".into(),
            Method::der(alpha),
            Regularizer::new(RegularizerKind::Em, 0.5).unwrap(),
            RegTarget::Ct,
            &draw_one,
        ),
        (
            "er+ewc".into(),
            Method::er(),
            Regularizer::new(RegularizerKind::Ewc, 0.5).unwrap(),
            RegTarget::Ct,
            &draw_one,
        ),
        (
            "derpp+si".into(),
            Method::derpp(alpha, beta),
            Regularizer::new(RegularizerKind::Si, 0.5).unwrap(),
            RegTarget::Ct,
            &draw_two,
        ),
    ];
    for (name, method, reg, target, draw) in composites {
        let pens = ParamPenalties {
            ewc: Some(&ewc),
            si: Some(&si),
        };
        let obj = objective(params, &x, &y, draw, &method, &reg, target, pens).unwrap();
        let analytic = obj.grads.flatten();
        let (xc, yc, dc) = (x.clone(), y.clone(), draw.clone());
        let (ec, sc) = (ewc.clone(), si.clone());
        let f = theta_loss(params, move |p| {
            let pens = ParamPenalties {
                ewc: Some(&ec),
                si: Some(&sc),
            };
            objective(p, &xc, &yc, &dc, &method, &reg, target, pens)
                .unwrap()
                .breakdown
                .total
        });
        push(&name, fd_worst(rng, &theta, &analytic, COORDS, f));
    }
    checks
}
