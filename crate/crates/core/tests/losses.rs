use ccdc_core::losses::{
    class_loss, class_loss_value, contrast_loss, correlation_contrastive_loss, total_loss, total_loss_value,
    type_contrastive_loss, AnchorSet, ContrastiveBatch, HyperParams,
};
use ccdc_core::tensor::{grad_check, GradCheckOptions};
use ccdc_core::{Modality, Parameters, Subtype, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use Modality::{Ct, Path};
use Subtype::{Luad, Lusc};

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    unit(&(0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn batch<'t>(
    tape: &'t Tape,
    feats: &[Vec<f64>],
    labels: &[Subtype],
    modality: &[Modality],
    pairing: &[(usize, usize)],
) -> ContrastiveBatch<'t> {
    ContrastiveBatch::new(
        feats.iter().map(|f| tape.constant(Tensor::vector(f.clone()))).collect(),
        labels.to_vec(),
        modality.to_vec(),
        pairing.to_vec(),
    )
    .unwrap()
}

fn type_oracle(k: &[Vec<f64>], labels: &[Subtype], tau: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..k.len() {
        let pos: Vec<usize> = (0..k.len()).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let den: f64 = (0..k.len())
            .filter(|&n| n != i)
            .map(|n| (dot(&k[i], &k[n]) / tau).exp())
            .sum();
        let mut s = 0.0;
        for &p in &pos {
            s += ((dot(&k[i], &k[p]) / tau).exp() / den).ln();
        }
        total += -s / pos.len() as f64;
    }
    total
}

fn corr_oracle(k: &[Vec<f64>], modality: &[Modality], pairing: &[(usize, usize)], tau: f64) -> f64 {
    let mut total = 0.0;
    for &(j, plus) in pairing {
        let den: f64 = (0..k.len())
            .filter(|&a| modality[a] == Path)
            .map(|a| (dot(&k[j], &k[a]) / tau).exp())
            .sum();
        total += -((dot(&k[j], &k[plus]) / tau).exp() / den).ln();
    }
    total
}

#[test]
fn class_loss_closed_forms() {
    let tape = Tape::new();
    let p = tape.constant(Tensor::vector(vec![0.5]));
    assert!((class_loss(&p, &[1.0]).unwrap().item() - std::f64::consts::LN_2).abs() < 1e-12);
    assert!((class_loss(&p, &[0.0]).unwrap().item() - std::f64::consts::LN_2).abs() < 1e-12);

    let p = tape.constant(Tensor::vector(vec![1.0, 0.0]));
    let l = class_loss(&p, &[1.0, 0.0]).unwrap().item();
    assert!(l <= -(1.0f64 - 1e-7).ln() + 1e-15);

    let p = tape.constant(Tensor::vector(vec![0.9, 0.2]));
    let l = class_loss(&p, &[1.0, 0.0]).unwrap().item();
    let want = (-(0.9f64).ln() - (0.8f64).ln()) / 2.0;
    assert!((l - want).abs() < 1e-12);
    assert!((want - 0.164252).abs() < 1e-6);
    assert_eq!(l, class_loss_value(&[0.9, 0.2], &[1.0, 0.0]).unwrap());

    assert!(class_loss(&p, &[1.0]).is_err());
}

#[test]
fn type_loss_closed_forms() {
    let tape = Tape::new();
    let v = unit(&[1.0, 2.0, 3.0]);
    let b = batch(&tape, &[v.clone(), v.clone()], &[Lusc, Lusc], &[Ct, Path], &[]);
    assert!(type_contrastive_loss(&b, 1.0, AnchorSet::All).unwrap().item().abs() < 1e-12);
    let b = batch(&tape, &[v.clone(), v], &[Lusc, Luad], &[Ct, Path], &[]);
    assert_eq!(type_contrastive_loss(&b, 1.0, AnchorSet::All).unwrap().item(), 0.0);
}

#[test]
fn type_loss_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..20 {
        let n = 4 + trial % 5;
        let k: Vec<Vec<f64>> = (0..n).map(|_| random_unit(6, &mut rng)).collect();
        let labels: Vec<Subtype> = (0..n).map(|_| Subtype::from_positive(rng.random())).collect();
        let modality: Vec<Modality> = (0..n).map(|i| if i % 2 == 0 { Ct } else { Path }).collect();
        let tape = Tape::new();
        let b = batch(&tape, &k, &labels, &modality, &[]);
        let tau = 0.5;
        let got = type_contrastive_loss(&b, tau, AnchorSet::All).unwrap().item();
        let want = type_oracle(&k, &labels, tau);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
        assert!(got >= -1e-12);
    }
}

#[test]
fn ct_only_anchor_switch() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let k: Vec<Vec<f64>> = (0..6).map(|_| random_unit(5, &mut rng)).collect();
    let labels = [Lusc, Luad, Lusc, Luad, Lusc, Lusc];
    let modality = [Ct, Path, Ct, Path, Ct, Path];
    let tape = Tape::new();
    let b = batch(&tape, &k, &labels, &modality, &[]);
    let got = type_contrastive_loss(&b, 0.3, AnchorSet::CtOnly).unwrap().item();
    let mut want = 0.0;
    for i in [0, 2, 4] {
        let pos: Vec<usize> = (0..6).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let den: f64 = (0..6)
            .filter(|&n| n != i)
            .map(|n| (dot(&k[i], &k[n]) / 0.3).exp())
            .sum();
        want -= pos
            .iter()
            .map(|&p| ((dot(&k[i], &k[p]) / 0.3).exp() / den).ln())
            .sum::<f64>()
            / pos.len() as f64;
    }
    assert!((got - want).abs() < 1e-10);
}

#[test]
fn correlation_loss_closed_forms() {
    let tape = Tape::new();
    let v = unit(&[0.3, -0.4, 0.5]);
    let w = unit(&[1.0, 1.0, -2.0]);
    let b = batch(&tape, &[v, w], &[Luad, Luad], &[Ct, Path], &[(0, 1)]);
    assert!(correlation_contrastive_loss(&b, 0.07).unwrap().item().abs() < 1e-12);

    let e1 = vec![1.0, 0.0];
    let e2 = vec![0.0, 1.0];
    let b = batch(
        &tape,
        &[e1.clone(), e1, e2.clone(), e2],
        &[Luad, Luad, Lusc, Lusc],
        &[Ct, Path, Ct, Path],
        &[(0, 1), (2, 3)],
    );
    let got = correlation_contrastive_loss(&b, 1.0).unwrap().item();
    let e = std::f64::consts::E;
    let want = 2.0 * -(e / (e + 1.0)).ln();
    assert!((got - want).abs() < 1e-12);
    assert!((got - 0.626523).abs() < 1e-6);
}

#[test]
fn correlation_loss_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let k: Vec<Vec<f64>> = (0..6).map(|_| random_unit(7, &mut rng)).collect();
        let labels: Vec<Subtype> = (0..6).map(|_| Subtype::from_positive(rng.random())).collect();
        let modality = [Ct, Path, Ct, Path, Ct, Path];
        let pairing = [(0, 1), (2, 3), (4, 5)];
        let tape = Tape::new();
        let b = batch(&tape, &k, &labels, &modality, &pairing);
        let got = correlation_contrastive_loss(&b, 0.2).unwrap().item();
        let want = corr_oracle(&k, &modality, &pairing, 0.2);
        assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0));
        assert!(got >= 0.0);
    }
}

#[test]
fn missing_pairing_is_input_error() {
    let tape = Tape::new();
    let b = batch(
        &tape,
        &[vec![1.0, 0.0], vec![0.0, 1.0]],
        &[Luad, Lusc],
        &[Ct, Path],
        &[],
    );
    assert!(matches!(
        correlation_contrastive_loss(&b, 1.0),
        Err(ccdc_core::Error::Input(_))
    ));
}

#[test]
fn contrast_and_total_compose() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k: Vec<Vec<f64>> = (0..4).map(|_| random_unit(5, &mut rng)).collect();
    let labels = [Luad, Luad, Lusc, Lusc];
    let modality = [Ct, Path, Ct, Path];
    let pairing = [(0, 1), (2, 3)];
    let tape = Tape::new();
    let b = batch(&tape, &k, &labels, &modality, &pairing);
    let hp = HyperParams {
        tau: 0.4,
        lambda_p: 0.5,
        ..Default::default()
    };
    let parts = contrast_loss(&b, &hp).unwrap();
    let want = type_oracle(&k, &labels, 0.4) + 0.5 * corr_oracle(&k, &modality, &pairing, 0.4);
    assert!((parts.combined.item() - want).abs() < 1e-10);
    let zero_p = HyperParams {
        lambda_p: 0.0,
        ..hp.clone()
    };
    assert_eq!(
        contrast_loss(&b, &zero_p).unwrap().combined.item(),
        parts.type_loss.item()
    );

    let class = tape.constant(Tensor::scalar(0.5));
    let contrast = tape.constant(Tensor::scalar(0.2));
    let hp3 = HyperParams {
        lambda_c: 0.3,
        ..Default::default()
    };
    assert!((total_loss(&class, Some(&contrast), true, &hp3).unwrap().item() - 0.56).abs() < 1e-15);
    let hp1 = HyperParams {
        lambda_c: 1.0,
        ..Default::default()
    };
    assert_eq!(
        total_loss(&class, Some(&contrast), true, &hp1).unwrap().item(),
        0.5 + 0.2
    );
    let gated = total_loss(&class, Some(&contrast), false, &hp1).unwrap();
    assert_eq!(gated.item().to_bits(), 0.5f64.to_bits());
    assert_eq!(gated.id(), class.id());
    assert_eq!(total_loss_value(0.5, 123.0, false, &hp1).to_bits(), 0.5f64.to_bits());
    assert_eq!(total_loss_value(0.5, 0.2, true, &hp3), 0.5 + 0.3 * 0.2);
}

#[test]
fn losses_invariant_to_scale_and_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let raw: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let labels = [Luad, Lusc, Luad, Lusc, Lusc, Luad];
    let modality = [Ct, Path, Ct, Path, Ct, Path];
    let pairing = [(0, 1), (2, 3), (4, 5)];
    let eval = |scale: f64, order: &[usize]| {
        let tape = Tape::new();
        let feats: Vec<_> = order
            .iter()
            .map(|&i| {
                let v = tape.constant(Tensor::vector(raw[i].iter().map(|x| x * scale).collect()));
                v.l2_normalize().unwrap()
            })
            .collect();
        let inv: Vec<usize> = (0..6).map(|i| order.iter().position(|&o| o == i).unwrap()).collect();
        let b = ContrastiveBatch::new(
            feats,
            order.iter().map(|&i| labels[i]).collect(),
            order.iter().map(|&i| modality[i]).collect(),
            pairing.iter().map(|&(c, p)| (inv[c], inv[p])).collect(),
        )
        .unwrap();
        (
            type_contrastive_loss(&b, 0.1, AnchorSet::All).unwrap().item(),
            correlation_contrastive_loss(&b, 0.1).unwrap().item(),
        )
    };
    let id = [0, 1, 2, 3, 4, 5];
    let (t0, c0) = eval(1.0, &id);
    let (t1, c1) = eval(37.5, &id);
    assert!((t0 - t1).abs() < 1e-10 && (c0 - c1).abs() < 1e-10);
    let (t2, c2) = eval(1.0, &[5, 3, 1, 0, 4, 2]);
    assert!((t0 - t2).abs() < 1e-10 && (c0 - c2).abs() < 1e-10);
}

#[test]
fn lower_temperature_raises_loss_when_negatives_win() {
    // the negative sits closer to each anchor than its positive
    let a = unit(&[1.0, 0.0, 0.0]);
    let p = unit(&[0.0, 1.0, 0.0]);
    let n = unit(&[1.0, 0.2, 0.0]);
    let tape = Tape::new();
    let tb = batch(
        &tape,
        &[a.clone(), p.clone(), n.clone()],
        &[Luad, Luad, Lusc],
        &[Ct, Path, Path],
        &[(0, 1)],
    );
    let mut prev_t = 0.0;
    let mut prev_c = 0.0;
    for tau in [2.0, 1.0, 0.5, 0.2, 0.1] {
        let t = type_contrastive_loss(&tb, tau, AnchorSet::All).unwrap().item();
        let c = correlation_contrastive_loss(&tb, tau).unwrap().item();
        assert!(t > prev_t && c > prev_c, "tau {tau}");
        prev_t = t;
        prev_c = c;
    }
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut params = Parameters::new();
    for i in 0..4 {
        params.insert(
            format!("f{i}"),
            Tensor::vector((0..5).map(|_| rng.random_range(-1.0..1.0)).collect()),
        );
    }
    params.insert("p", Tensor::vector(vec![0.3, 0.8, 0.6, 0.1]));
    let hp = HyperParams {
        tau: 0.3,
        lambda_p: 0.7,
        lambda_c: 0.9,
        ..Default::default()
    };
    let report = grad_check(
        &params,
        |tape, p| {
            let feats = (0..4)
                .map(|i| tape.param(p, &format!("f{i}"))?.l2_normalize())
                .collect::<ccdc_core::Result<Vec<_>>>()?;
            let b = ContrastiveBatch::new(
                feats,
                vec![Luad, Luad, Lusc, Lusc],
                vec![Ct, Path, Ct, Path],
                vec![(0, 1), (2, 3)],
            )?;
            let c = contrast_loss(&b, &hp)?;
            let cls = class_loss(&tape.param(p, "p")?, &[0.0, 1.0, 1.0, 0.0])?;
            total_loss(&cls, Some(&c.combined), true, &hp)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(1e-6), "{report:?}");
}
