//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line; the
//! process exits non-zero if any criterion fails. Pass a substring to run a
//! subset, e.g. `cargo test --test acceptance -- c10`.

use std::io::Write;
use std::net::TcpListener;
use std::process::ExitCode;
use std::time::Instant;

use num_bigint::BigUint;
use permsplit::attack::{self, AttackConfig};
use permsplit::data::{self, Task};
use permsplit::edgemodel::{EdgeGeometry, Sample};
use permsplit::encoder::{stack_backward, stack_forward, BlockConfig, EncoderBlockWeights, TebVariant};
use permsplit::permutation::log2_perm_space;
use permsplit::proto::{self, CloudServer, LoopbackTransport, Message, MessageKind, RecordingTransport, TcpTransport};
use permsplit::rngs::{random_matrix, substream, StreamRng};
use permsplit::shuffle::{
    self, authorize, cut_and_paste, deauthorize, evaluate_local, train_loopback, EdgeTrainer, Rect, ShuffleMode,
    TrainConfig, TrainOutcome,
};
use permsplit::tensor::{Activation, Matrix};
use permsplit::{verify, Permutation, Result, ShuffleKey};
use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SEED: u64 = 0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

// ---------------------------------------------------------------- oracles

fn perm_matrix(p: &Permutation) -> Matrix {
    Matrix::from_fn(p.len(), p.len(), |i, j| if p.indices()[i] == j { 1.0 } else { 0.0 })
}

/// `P_R · Z · P_Cᵀ` by explicit matrix products.
fn shuffle_oracle(z: &Matrix, pr: &Matrix, pc: &Matrix) -> Matrix {
    pr.matmul(z).unwrap().matmul_t(pc).unwrap()
}

fn conj_vec(v: &[f64], pc: &Matrix) -> Vec<f64> {
    Matrix::row_vector(v).unwrap().matmul_t(pc).unwrap().into_data()
}

/// `P W Pᵀ` on every matrix, `v Pᵀ` on every vector.
fn conj_oracle(blocks: &[EncoderBlockWeights], pc: &Matrix) -> Vec<EncoderBlockWeights> {
    let m = |w: &Matrix| pc.matmul(w).unwrap().matmul_t(pc).unwrap();
    blocks
        .iter()
        .map(|b| {
            let mut c = b.clone();
            c.w_q = m(&b.w_q);
            c.w_k = m(&b.w_k);
            c.w_v = m(&b.w_v);
            c.w_1 = m(&b.w_1);
            c.w_2 = m(&b.w_2);
            if let Some(bi) = &mut c.biases {
                for v in [&mut bi.b_q, &mut bi.b_k, &mut bi.b_v, &mut bi.b_1, &mut bi.b_2] {
                    *v = conj_vec(v, pc);
                }
            }
            if let Some(n) = &mut c.norms {
                for v in [&mut n.gamma1, &mut n.beta1, &mut n.gamma2, &mut n.beta2] {
                    *v = conj_vec(v, pc);
                }
            }
            c
        })
        .collect()
}

fn stack_diff(a: &[EncoderBlockWeights], b: &[EncoderBlockWeights]) -> f64 {
    permsplit::encoder::stack_max_abs_diff(a, b).unwrap()
}

fn random_case(rng: &mut StreamRng, t: usize) -> (usize, usize, Vec<EncoderBlockWeights>, BlockConfig) {
    let (p, d, layers) = (rng.random_range(2..=8), rng.random_range(2..=8), rng.random_range(1..=3));
    let variant = if t % 2 == 0 { TebVariant::Full } else { TebVariant::Minimal };
    let activation = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh };
    let cfg = BlockConfig {
        variant,
        activation,
        column_shuffle: true,
        ..Default::default()
    };
    (p, d, verify::random_stack(rng, layers, d, variant).unwrap(), cfg)
}

// ---------------------------------------------------------------- training fixtures

fn geometry(d: usize, n_classes: usize, pe: bool) -> EdgeGeometry {
    EdgeGeometry {
        channels: 1,
        image_h: 8,
        image_w: 8,
        patch_h: 4,
        patch_w: 4,
        d,
        n_classes,
        position_embedding: pe,
    }
}

fn train_config(mode: ShuffleMode, geometry: EdgeGeometry, mixup_prob: f64) -> TrainConfig {
    TrainConfig {
        mode,
        mixup_prob,
        lr: 0.01,
        epochs: 5,
        batch_size: 16,
        seed: SEED,
        geometry,
        n_layers: 2,
        n_heads: 1,
        teb_variant: TebVariant::Full,
        activation: Activation::Relu,
    }
}

struct Triplet {
    cfgs: [TrainConfig; 3],
    key: ShuffleKey,
    test: Vec<Sample>,
    runs: [TrainOutcome; 3],
}

fn train_triplet(geometry: EdgeGeometry, task: Task, mixup_prob: f64, epochs: usize) -> Triplet {
    let (train, test) = data::train_test(&geometry, task, 1000, 200, SEED).unwrap();
    let key = ShuffleKey::generate(geometry.p(), geometry.d, SEED).unwrap();
    let cfgs = [ShuffleMode::Vanilla, ShuffleMode::RowShuffle, ShuffleMode::RowColumnShuffle]
        .map(|m| TrainConfig {
            epochs,
            ..train_config(m, geometry, mixup_prob)
        });
    let runs = std::thread::scope(|s| {
        let handles: Vec<_> = cfgs.iter().map(|c| s.spawn(|| train_loopback(c, &key, &train).unwrap())).collect();
        let mut it = handles.into_iter().map(|h| h.join().unwrap());
        [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()]
    });
    Triplet { cfgs, key, test, runs }
}

fn fixture(slot: &'static std::sync::OnceLock<Triplet>, f: impl FnOnce() -> Triplet) -> &'static Triplet {
    slot.get_or_init(f)
}

fn plain_runs() -> &'static Triplet {
    static CELL: std::sync::OnceLock<Triplet> = std::sync::OnceLock::new();
    fixture(&CELL, || train_triplet(geometry(16, 2, false), Task::Plain, 0.0, 5))
}

fn order_runs() -> &'static Triplet {
    static CELL: std::sync::OnceLock<Triplet> = std::sync::OnceLock::new();
    // The order task needs more passes than the plain one to clear 90%.
    fixture(&CELL, || train_triplet(geometry(16, 2, true), Task::OrderDependent, 0.0, 20))
}

fn cutmix_runs() -> &'static Triplet {
    static CELL: std::sync::OnceLock<Triplet> = std::sync::OnceLock::new();
    fixture(&CELL, || train_triplet(geometry(16, 2, false), Task::Plain, 0.5, 5))
}

struct Lossless {
    rs_gap: f64,
    rcs_gap: f64,
    rcs_weights: f64,
    acc: [f64; 3],
    steps: usize,
}

fn lossless(t: &Triplet) -> Lossless {
    let [van, rs, rcs] = &t.runs;
    let losses = |r: &TrainOutcome| r.step_losses();
    let acc = [0, 1, 2].map(|i| {
        let k = t.cfgs[i].effective_key(&t.key);
        evaluate_local(&t.runs[i].edge, &t.runs[i].cloud, &t.cfgs[i], k.as_ref(), &t.test)
            .unwrap()
            .accuracy
    });
    Lossless {
        rs_gap: verify::max_loss_gap(&losses(van), &losses(rs)),
        rcs_gap: verify::max_loss_gap(&losses(van), &losses(rcs)),
        rcs_weights: stack_diff(&rcs.cloud, &conj_oracle(&van.cloud, &perm_matrix(t.key.p_col()))),
        acc,
        steps: losses(van).len(),
    }
}

fn lossless_verdict(t: &Triplet) -> Result<Verdict> {
    let l = lossless(t);
    let pass = l.rs_gap < 1e-10 && l.rcs_gap < 1e-10 && l.rcs_weights < 1e-8 && l.acc[0] == l.acc[1] && l.acc[0] == l.acc[2];
    verdict(
        pass,
        format!(
            "{} steps; loss gap RS {:.1e}, RCS {:.1e}; RCS weight conjugation {:.1e}; test acc {:?}",
            l.steps, l.rs_gap, l.rcs_gap, l.rcs_weights, l.acc
        ),
    )
}

fn mismatch_verdict(t: &Triplet) -> Result<Verdict> {
    let rcs = &t.runs[2];
    let cfg = &t.cfgs[2];
    let chance = 1.0 / cfg.geometry.n_classes as f64;
    let mismatched = evaluate_local(&rcs.edge, &rcs.cloud, cfg, None, &t.test)?.accuracy;
    let matched = evaluate_local(&rcs.edge, &rcs.cloud, cfg, Some(&t.key), &t.test)?;
    let van = evaluate_local(&t.runs[0].edge, &t.runs[0].cloud, &t.cfgs[0], None, &t.test)?;
    let pass = (mismatched - chance).abs() <= 0.10 && matched.accuracy == van.accuracy && matched.predictions == van.predictions;
    verdict(
        pass,
        format!(
            "mismatched {mismatched:.3} (chance {chance:.3}); matched {:.3} vs vanilla {:.3}",
            matched.accuracy, van.accuracy
        ),
    )
}

// ---------------------------------------------------------------- criteria

fn c1() -> Result<Verdict> {
    let mut rng = substream(SEED, "acceptance-c1");
    let mut worst = 0.0f64;
    for t in 0..100 {
        let (p, d, blocks, cfg) = random_case(&mut rng, t);
        let z = random_matrix(&mut rng, p, d, 1.0);
        let pr = perm_matrix(&Permutation::sample(p, &mut rng)?);
        let pc = perm_matrix(&Permutation::sample(d, &mut rng)?);
        let (y, _) = stack_forward(&blocks, &cfg, &z)?;
        let (y_s, _) = stack_forward(&conj_oracle(&blocks, &pc), &cfg, &shuffle_oracle(&z, &pr, &pc))?;
        worst = worst.max(y_s.max_abs_diff(&shuffle_oracle(&y, &pr, &pc))?);
    }
    verdict(worst < 1e-9, format!("100 trials, max |diff| {worst:.2e}"))
}

fn c2() -> Result<Verdict> {
    let mut rng = substream(SEED, "acceptance-c2");
    let tensor = verify::tensor_gradcheck(&mut rng, 50)?;
    let encoder = verify::encoder_gradcheck(&mut rng, 50)?;
    let edge = verify::edge_gradcheck(&mut rng, 50)?;
    let worst = tensor.max(encoder).max(edge);
    verdict(
        worst < 1e-5,
        format!("50 instances each, rel err tensor {tensor:.1e}, encoder {encoder:.1e}, edge {edge:.1e}"),
    )
}

fn c3() -> Result<Verdict> {
    let mut rng = substream(SEED, "acceptance-c3");
    let mut worst = 0.0f64;
    for t in 0..100 {
        let (p, d, blocks, cfg) = random_case(&mut rng, t);
        let z = random_matrix(&mut rng, p, d, 1.0);
        let g = random_matrix(&mut rng, p, d, 1.0);
        let pr = perm_matrix(&Permutation::sample(p, &mut rng)?);
        let pc = perm_matrix(&Permutation::sample(d, &mut rng)?);
        let (_, acts) = stack_forward(&blocks, &cfg, &z)?;
        let plain = stack_backward(&blocks, &cfg, &acts, &g)?;
        let conj = conj_oracle(&blocks, &pc);
        let (_, acts_s) = stack_forward(&conj, &cfg, &shuffle_oracle(&z, &pr, &pc))?;
        let shuffled = stack_backward(&conj, &cfg, &acts_s, &shuffle_oracle(&g, &pr, &pc))?;
        worst = worst.max(stack_diff(&shuffled.blocks, &conj_oracle(&plain.blocks, &pc)));
        worst = worst.max(shuffled.d_z.max_abs_diff(&shuffle_oracle(&plain.d_z, &pr, &pc))?);
    }
    verdict(worst < 1e-9, format!("100 trials (half full-variant), max |diff| {worst:.2e}"))
}

fn c4() -> Result<Verdict> {
    lossless_verdict(plain_runs())
}

fn c5() -> Result<Verdict> {
    mismatch_verdict(plain_runs())
}

fn c6() -> Result<Verdict> {
    let t = plain_runs();
    let (van, cfg) = (&t.runs[0], &t.cfgs[2]);
    let plain = evaluate_local(&van.edge, &van.cloud, &t.cfgs[0], None, &t.test)?;
    let mut rng = substream(SEED, "acceptance-c6");
    let p_new = Permutation::sample(cfg.geometry.d, &mut rng)?;
    let new_key = ShuffleKey::new(cfg.geometry.p(), cfg.geometry.d, p_new.clone(), rng.random())?;
    let bc = cfg.block_config();
    let authorized = authorize(&van.cloud, &bc, &p_new)?;
    let shuffled = evaluate_local(&van.edge, &authorized, cfg, Some(&new_key), &t.test)?;
    let back = deauthorize(&authorized, &bc, &new_key)?;
    let same_preds = shuffled.predictions == plain.predictions;
    let bit_identical = back == van.cloud;
    verdict(
        same_preds && bit_identical,
        format!(
            "{} test predictions identical: {same_preds}; deauthorize bit-identical: {bit_identical}",
            t.test.len()
        ),
    )
}

fn c7() -> Result<Verdict> {
    let mut worst = 0.0f64;
    for seed in 0..5 {
        for mixup in [0.0, 0.5] {
            let mut cfg = train_config(ShuffleMode::Vanilla, geometry(8, 4, seed % 2 == 1), mixup);
            cfg.seed = seed;
            cfg.epochs = 1;
            let data = data::generate(&cfg.geometry, Task::Plain, cfg.batch_size, seed, "data-train")?;
            let key = ShuffleKey::generate(cfg.geometry.p(), cfg.geometry.d, seed)?;
            let van = train_loopback(&cfg, &key, &data)?;
            for mode in [ShuffleMode::RowShuffle, ShuffleMode::RowColumnShuffle] {
                cfg.mode = mode;
                worst = worst.max(train_loopback(&cfg, &key, &data)?.edge.max_abs_diff(&van.edge)?);
            }
        }
    }
    verdict(worst < 1e-12, format!("5 seeds x mixup on/off, max edge weight diff {worst:.2e}"))
}

fn c8() -> Result<Verdict> {
    let t = order_runs();
    let acc = evaluate_local(&t.runs[0].edge, &t.runs[0].cloud, &t.cfgs[0], None, &t.test)?.accuracy;
    let l = lossless_verdict(t)?;
    let m = mismatch_verdict(t)?;
    verdict(
        acc > 0.9 && l.pass && m.pass,
        format!(
            "test acc {acc:.3}; lossless {}: {}; mismatch {}: {}",
            pass_word(l.pass),
            l.detail,
            pass_word(m.pass),
            m.detail
        ),
    )
}

/// Raw bit patterns, so subnormals, signed zeros and extremes all show up.
fn random_finite(rng: &mut StreamRng) -> f64 {
    loop {
        let v = if rng.random_bool(0.3) { f64::from_bits(rng.random()) } else { rng.random_range(-1e3..1e3) };
        if v.is_finite() {
            return v;
        }
    }
}

fn random_message(rng: &mut StreamRng) -> Message {
    let matrix = |rng: &mut StreamRng| {
        let (r, c) = (rng.random_range(1..=9), rng.random_range(1..=9));
        Matrix::from_fn(r, c, |_, _| random_finite(rng))
    };
    match rng.random_range(0..10) {
        0 => Message::Hello(proto::Hello {
            p: rng.random(),
            d: rng.random(),
            n_layers: rng.random(),
            n_heads: rng.random(),
        }),
        1 => Message::ConfigAck,
        2 => Message::FwdReq(matrix(rng)),
        3 => Message::FwdResp(matrix(rng)),
        4 => Message::BwdReq(matrix(rng)),
        5 => Message::BwdAck(Some(matrix(rng))),
        6 => Message::BwdAck(None),
        7 => Message::Step,
        8 => Message::Shutdown,
        _ => Message::Error {
            code: rng.random(),
            message: (0..rng.random_range(0..40)).map(|_| rng.random_range('\u{20}'..'\u{2FF}')).collect(),
        },
    }
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle)
}

fn c9() -> Result<Verdict> {
    // loopback vs TCP
    let mut cfg = train_config(ShuffleMode::RowColumnShuffle, geometry(8, 2, false), 0.5);
    cfg.epochs = 2;
    let data = data::generate(&cfg.geometry, Task::Plain, 96, SEED, "data-train")?;
    let key = ShuffleKey::generate(cfg.geometry.p(), cfg.geometry.d, SEED)?;
    let local = train_loopback(&cfg, &key, &data)?;

    let (edge, plain) = shuffle::initial_models(&cfg)?;
    let cloud = shuffle::cloud_weights_for_mode(&cfg, &plain, &key)?;
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    let mut server = CloudServer::new(cloud, cfg.block_config(), cfg.lr)?;
    let (tcp_edge, tcp_cloud) = std::thread::scope(|s| -> Result<_> {
        let cloud_side = s.spawn(|| proto::run_cloud(&listener, &mut server, Some(1)));
        let mut trainer = EdgeTrainer::connect(cfg.clone(), edge, &key, TcpTransport::connect(addr)?)?;
        for _ in 0..cfg.epochs {
            trainer.train_epoch(&data)?;
        }
        trainer.shutdown()?;
        cloud_side.join().expect("cloud thread")?;
        Ok(trainer.into_parts().0)
    })
    .map(|e| (e, server.into_blocks()))?;
    let transports_equal = tcp_edge == local.edge && tcp_cloud == local.cloud;

    // codec round trip
    let mut rng = substream(SEED, "acceptance-c9");
    let mut codec_ok = 0;
    for _ in 0..1000 {
        let msg = random_message(&mut rng);
        let bytes = proto::encode(&msg);
        let (back, used) = proto::decode(&bytes)?;
        if used == bytes.len() && proto::encode(&back) == bytes && back.kind() == msg.kind() {
            codec_ok += 1;
        }
    }

    // information boundary
    let (edge, plain) = shuffle::initial_models(&cfg)?;
    let cloud = shuffle::cloud_weights_for_mode(&cfg, &plain, &key)?;
    let server = CloudServer::new(cloud, cfg.block_config(), cfg.lr)?;
    let rec = RecordingTransport::new(LoopbackTransport::new(server));
    let mut trainer = EdgeTrainer::connect(cfg.clone(), edge, &key, rec)?;
    trainer.train_epoch(&data)?;
    trainer.evaluate(&data[..8])?;
    trainer.shutdown()?;
    let frames = trainer.transport().sent_frames().to_vec();
    let (p, d) = (cfg.geometry.p(), cfg.geometry.d);
    let mut secrets: Vec<Vec<u8>> = vec![key.to_toml().into_bytes(), key.row_seed().to_le_bytes().to_vec()];
    for width in [4usize, 8] {
        secrets.push(key.p_col().indices().iter().flat_map(|&i| (i as u64).to_le_bytes()[..width].to_vec()).collect());
    }
    secrets.push(key.p_col().indices().iter().flat_map(|&i| (i as f64).to_le_bytes()).collect());
    let mut boundary_ok = true;
    let mut counts = [0usize; 10];
    for f in &frames {
        let (msg, used) = proto::decode(f)?;
        counts[msg.kind() as usize] += 1;
        boundary_ok &= used == f.len() && proto::EDGE_WHITELIST.contains(&msg.kind());
        boundary_ok &= match &msg {
            Message::FwdReq(m) | Message::BwdReq(m) => m.shape() == (p, d) && f.len() == proto::HEADER_LEN + 8 + 8 * p * d,
            Message::Hello(h) => *h == cfg.hello(),
            Message::Step | Message::Shutdown => f.len() == proto::HEADER_LEN,
            _ => false,
        };
        boundary_ok &= !secrets.iter().any(|s| contains(f, s));
    }
    let steps = data.len().div_ceil(cfg.batch_size);
    boundary_ok &= counts[MessageKind::FwdReq as usize] == data.len() + 8
        && counts[MessageKind::BwdReq as usize] == data.len()
        && counts[MessageKind::Step as usize] == steps
        && counts[MessageKind::Hello as usize] == 1
        && counts[MessageKind::Shutdown as usize] == 1;

    verdict(
        transports_equal && codec_ok == 1000 && boundary_ok,
        format!(
            "loopback == TCP bitwise: {transports_equal}; codec {codec_ok}/1000; {} edge frames within boundary: {boundary_ok}",
            frames.len()
        ),
    )
}

struct AttackSeed {
    bb: [f64; 3],
    wb: [f64; 2],
}

fn c10() -> Result<Verdict> {
    let seeds: Vec<u64> = (0..10).collect();
    let results: Vec<AttackSeed> = std::thread::scope(|s| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                s.spawn(move || -> Result<AttackSeed> {
                    let cfg = AttackConfig::desk(seed);
                    let modes = [ShuffleMode::Vanilla, ShuffleMode::RowShuffle, ShuffleMode::RowColumnShuffle];
                    let mut bb = [0.0; 3];
                    for (i, m) in modes.iter().enumerate() {
                        bb[i] = attack::run_blackbox(&cfg, *m)?.mse;
                    }
                    let final_obj = |m| -> Result<f64> {
                        Ok(*attack::run_whitebox(&cfg, m)?.objective_curve.last().expect("iterations > 0"))
                    };
                    Ok(AttackSeed {
                        bb,
                        wb: [final_obj(ShuffleMode::Vanilla)?, final_obj(ShuffleMode::RowColumnShuffle)?],
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("attack thread")).collect::<Result<Vec<_>>>()
    })?;
    let bb_wins = results.iter().filter(|r| r.bb[2] >= 2.0 * r.bb[0]).count();
    let wb_wins = results.iter().filter(|r| r.wb[1] >= 10.0 * r.wb[0]).count();
    let ordered = results.iter().filter(|r| r.bb[0] <= r.bb[1] && r.bb[1] <= r.bb[2]).count();
    let mean = |i: usize| results.iter().map(|r| r.bb[i]).sum::<f64>() / results.len() as f64;
    println!(
        "    black-box mean MSE none {:.2e}, row {:.2e}, row+col {:.2e}",
        mean(0),
        mean(1),
        mean(2)
    );
    // Reported, not gated: with the same row draws in both modes and a fixed
    // column permutation the decoder can absorb, row vs row+col is a coin flip.
    println!(
        "    invariant none <= row <= row+col on a majority of seeds: {} ({ordered}/{})",
        pass_word(2 * ordered > results.len()),
        results.len()
    );
    for (seed, r) in seeds.iter().zip(&results) {
        println!(
            "    seed {seed}: bb {:.2e} / {:.2e} / {:.2e}, wb objective {:.2e} -> {:.2e}",
            r.bb[0], r.bb[1], r.bb[2], r.wb[0], r.wb[1]
        );
    }
    verdict(
        2 * bb_wins > results.len() && wb_wins == results.len(),
        format!(
            "black-box RCS >= 2x none on {bb_wins}/{n} seeds; white-box objective >= 10x on {wb_wins}/{n}",
            n = results.len()
        ),
    )
}

fn exact_log2(n: &BigUint) -> f64 {
    let bits = n.bits();
    let shift = bits.saturating_sub(64);
    let top: u64 = (n >> shift).try_into().expect("fits in 64 bits");
    shift as f64 + (top as f64).log2()
}

fn factorial(n: usize) -> BigUint {
    (1..=n as u64).fold(BigUint::from(1u32), |acc, k| acc * k)
}

fn perm_rank(idx: &[usize]) -> usize {
    // Lehmer code
    let n = idx.len();
    let mut rank = 0;
    for i in 0..n {
        let smaller = idx[i + 1..].iter().filter(|&&v| v < idx[i]).count();
        rank = rank * (n - i) + smaller;
    }
    rank
}

fn c11() -> Result<Verdict> {
    let mut worst = 0.0f64;
    let mut pairs: Vec<(usize, usize)> = (1..=20).flat_map(|p| (1..=20).map(move |d| (p, d))).collect();
    pairs.push((197, 768));
    for (p, d) in pairs {
        let exact = exact_log2(&(factorial(p) * factorial(d)));
        worst = worst.max((log2_perm_space(p, d) - exact).abs() / exact.max(1.0));
    }
    let key = ShuffleKey::generate(3, 4, SEED)?;
    let n = 60_000u64;
    let mut counts = [0f64; 6];
    for i in 0..n {
        counts[perm_rank(key.row_perm(0, i).indices())] += 1.0;
    }
    let expected = n as f64 / 6.0;
    let stat: f64 = counts.iter().map(|c| (c - expected).powi(2) / expected).sum();
    let p_value = ChiSquared::new(5.0).expect("dof > 0").sf(stat);
    verdict(
        worst < 1e-12 && p_value > 0.001,
        format!("log2 rel err {worst:.1e} over p,d <= 20 and (197, 768); chi-square {stat:.2}, p = {p_value:.3}"),
    )
}

fn c12() -> Result<Verdict> {
    let geom = geometry(8, 4, false);
    let mut rng = substream(SEED, "acceptance-c12");
    let batch = data::generate(&geom, Task::Plain, 16, SEED, "cutmix")?;
    let (h, w) = (geom.image_h, geom.image_w);
    let mut mask_ok = true;
    let mut mass = 0.0f64;
    let mut check = |a: &Sample, b: &Sample, m: &shuffle::MixedSample, rect: Rect| {
        for c in 0..geom.channels {
            for y in 0..h {
                for x in 0..w {
                    let src = if rect.contains(y, x) { b } else { a };
                    mask_ok &= m.image.get(c, y, x).to_bits() == src.image.get(c, y, x).to_bits();
                }
            }
        }
        let frac = rect.area() as f64 / (h * w) as f64;
        let mut expect = vec![0.0; geom.n_classes];
        expect[a.label] += 1.0 - frac;
        expect[b.label] += frac;
        mass = mass.max((m.soft_label.iter().sum::<f64>() - 1.0).abs());
        mask_ok &= m.soft_label.iter().zip(&expect).all(|(x, y)| (x - y).abs() < 1e-15);
    };
    for _ in 0..500 {
        let i = rng.random_range(0..batch.len());
        let j = rng.random_range(0..batch.len());
        let (rw, rh) = (rng.random_range(0..=w), rng.random_range(0..=h));
        let rect = Rect {
            x: rng.random_range(0..=w - rw),
            y: rng.random_range(0..=h - rh),
            w: rw,
            h: rh,
        };
        let m = cut_and_paste(&batch[i], &batch[j], rect, geom.n_classes)?;
        check(&batch[i], &batch[j], &m, rect);
    }
    for _ in 0..50 {
        for (i, m) in shuffle::cutmix(&batch, 1.0, geom.n_classes, &mut rng)?.iter().enumerate() {
            let (rect, j) = (m.rect.expect("prob 1 mixes"), m.partner.expect("prob 1 mixes"));
            check(&batch[i], &batch[j], m, rect);
        }
    }
    let l = lossless_verdict(cutmix_runs())?;
    verdict(
        mask_ok && mass < 1e-12 && l.pass,
        format!("mask identity {mask_ok}; label mass err {mass:.1e}; with CutMix {}: {}", pass_word(l.pass), l.detail),
    )
}

fn pass_word(p: bool) -> &'static str {
    if p {
        "PASS"
    } else {
        "FAIL"
    }
}

type Criterion = (&'static str, &'static str, fn() -> Result<Verdict>);

const CRITERIA: [Criterion; 12] = [
    ("c1", "forward permutation equivalence", c1),
    ("c2", "gradients match finite differences", c2),
    ("c3", "weight gradients are conjugated", c3),
    ("c4", "lossless training", c4),
    ("c5", "mismatch degrades to chance", c5),
    ("c6", "authorization round trip", c6),
    ("c7", "edge parameters unaffected by shuffling", c7),
    ("c8", "order-dependent task", c8),
    ("c9", "protocol fidelity", c9),
    ("c10", "privacy delta under attack", c10),
    ("c11", "permutation space accounting", c11),
    ("c12", "CutMix correctness", c12),
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| id == f || name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = run().unwrap_or_else(|e| Verdict {
            pass: false,
            detail: format!("error: {e}"),
        });
        failed += usize::from(!v.pass);
        println!(
            "criterion {:>3} {} {name}: {} ({:.1}s)",
            id,
            pass_word(v.pass),
            v.detail,
            start.elapsed().as_secs_f64()
        );
        std::io::stdout().flush().ok();
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
