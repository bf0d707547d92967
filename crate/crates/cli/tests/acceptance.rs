// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Runs without the libtest harness so the lines reach the terminal as they finish.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::{max_diff, rng, row_sums, to_m, uniform, M};
use gevst::config::{BranchId, FusionBase, GesaVariant, ModelConfig, Modulation, TrainConfig};
use gevst::data::generate_dataset;
use gevst::decoder::{beam_search, cross_attend, greedy_decode, modulated_multi_input};
use gevst::fusion::{attend_and_fuse, attention_scores, combined_weights, inter_geometry};
use gevst::gesa::{combined_map, gate_scores, gesa_attention_maps, gesa_layer};
use gevst::metrics::{bleu, evaluate, rouge_l, CiderD};
use gevst::model::{Gevst, PreparedSample};
use gevst::params::{param_grad_check, param_grad_check_ridders, Graph, ParamStore};
use gevst::tensor::{Tape, Tensor, Var};
use gevst::train::{
    corpus_vocabulary, greedy_cider, load_checkpoint, save_checkpoint, scst_step,
    teacher_forcing_stats, train_scst, train_xe, xe_loss, Adam, Policy,
};
use gevst::vocab::BOS;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one criterion: failed requirements and informational notes.
#[derive(Default)]
struct Outcome {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Outcome {
    fn require(&mut self, ok: bool, what: impl FnOnce() -> String) {
        if !ok {
            self.failures.push(what());
        }
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }
}

fn report(n: usize, title: &str, o: &Outcome, secs: f64) -> bool {
    let pass = o.failures.is_empty();
    let mut parts = o.notes.clone();
    parts.extend(o.failures.iter().map(|f| format!("FAILED: {f}")));
    println!(
        "criterion {n:>2} {} {title} [{secs:.1} s] {}",
        if pass { "PASS" } else { "FAIL" },
        parts.join("; ")
    );
    pass
}

fn miniature_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 2,
        expansion_rate: 2,
        fusion_cells: 1,
        layers: 2,
        dc_width: 16,
        dc_heads: 2,
        dc_layers: 1,
        ..ModelConfig::default()
    }
}

// Gradient check of the whole model's cross-entropy loss.
fn gradient_correctness(o: &mut Outcome) {
    const TOL: f64 = 1e-4;
    const COORDS: usize = 8;
    let t0 = Instant::now();
    let mut s = generate_dataset(7, 200)
        .unwrap()
        .into_iter()
        .find(|s| s.regions.len() == 3)
        .expect("a three-region scene");
    s.dense_captions.truncate(2);
    let vocab = corpus_vocabulary(std::slice::from_ref(&s), 1);
    let mut p = PreparedSample::new(&s, &vocab).unwrap();
    // BOS, three words, EOS: four decoder steps.
    let mut target = p.targets[0][..4].to_vec();
    target.push(gevst::vocab::EOS);
    p.targets[0] = target.clone();
    let (model, store) = Gevst::new(&miniature_config(), vocab.len(), 1).unwrap();
    fn loss<'t>(
        g: &Graph<'t>,
        model: &Gevst,
        p: &PreparedSample,
        target: &[usize],
    ) -> gevst::Result<Var<'t>> {
        xe_loss(model.logits(g, p, &target[..4])?, &target[1..])
    }

    let report =
        param_grad_check_ridders(&store, |g| loss(g, &model, &p, &target), 0.05, Some(COORDS))
            .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let (worst_name, worst) = report
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, e)| (n.clone(), *e))
        .unwrap();
    let failing: Vec<&str> = report
        .iter()
        .filter(|r| r.1 >= TOL)
        .map(|r| r.0.as_str())
        .collect();
    o.note(format!(
        "{} tensors, {} parameters, N_v=3 N_s=2 T=4, up to {COORDS} coordinates each by Ridders extrapolation; worst {worst:.2e} ({worst_name}), tol {TOL:e}",
        report.len(),
        store.num_elements()
    ));
    o.require(failing.is_empty(), || {
        format!("{} tensors at or above {TOL:e}: {failing:?}", failing.len())
    });
    o.require(secs < 60.0, || format!("runtime {secs:.1} s exceeds 60 s"));

    // For comparison: a single central difference with eps 1e-5 at the same coordinates.
    let plain =
        param_grad_check(&store, |g| loss(g, &model, &p, &target), 1e-5, Some(COORDS)).unwrap();
    let over = plain.iter().filter(|r| r.1 >= TOL).count();
    let plain_worst = plain.iter().map(|r| r.1).fold(0.0, f64::max);
    o.note(format!(
        "single-step eps 1e-5 for comparison: {over} tensors at or above tol, worst {plain_worst:.2e} (gradients near 1e-9 fall under its cancellation floor)"
    ));
}

fn fusion_invariants(o: &mut Outcome) {
    let mut r = rng(2024);
    let (mut worst1, mut worst2, mut hull) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..100u64 {
        let (n, m) = (r.random_range(1..6), r.random_range(1..6));
        let d = [4, 6, 8][r.random_range(0..3)];
        let (store, c) = common::fusion::cell(d, 2, 1000 + seed);
        let x = common::fusion::inputs(n, m, d, 5000 + seed);
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        let pair = attention_scores(
            &g,
            g.constant(x.qc.clone()),
            g.constant(x.kc.clone()),
            g.constant(x.qg.clone()),
            g.constant(x.kg.clone()),
            &c,
            FusionBase::CG,
        )
        .unwrap();
        for map in [pair.content.unwrap(), pair.geometry.unwrap()] {
            for s in row_sums(&map.value()) {
                worst1 = worst1.max((s - 1.0).abs());
            }
        }
        for s in row_sums(&combined_weights(&pair, false).unwrap().value()) {
            worst2 = worst2.max((s - 2.0).abs());
        }
        let (sstore, stack) =
            common::fusion::stack(d, 2, 1 + (seed % 3) as usize, FusionBase::CG, 9000 + seed);
        let (_, inter) = common::fusion::run_stack(&sstore, &stack, &x);
        for j in 0..d {
            let col: Vec<f64> = (0..m).map(|k| x.kg.at(k, j)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..n {
                let v = inter.at(i, j);
                hull = hull.max(lo - v).max(v - hi);
            }
        }
    }
    o.note(format!(
        "100 instances: |row sum - 1| <= {worst1:.1e}, |summed row - 2| <= {worst2:.1e}, hull excursion {:.1e}",
        hull.max(0.0)
    ));
    o.require(worst1 <= 1e-9, || {
        format!("content/geometry rows off by {worst1:e}")
    });
    o.require(worst2 <= 1e-9, || format!("summed rows off by {worst2:e}"));
    o.require(hull <= 1e-12, || {
        format!("inter geometry leaves the hull by {hull:e}")
    });
}

fn gesa_invariants(o: &mut Outcome) {
    use common::gesa::{branch, layer, run_branch, xs, X};
    let (mut gate_err, mut row_err) = (0.0f64, 0.0f64);
    let mut contained = 0;
    for seed in 0..20u64 {
        let n = 1 + (seed % 5) as usize;
        let (store, p) = layer(8, 300 + seed);
        let x = xs(n, 8, 400 + seed);
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        let maps = gesa_attention_maps(
            &g,
            g.constant(x.x.clone()),
            g.constant(x.gi.clone()),
            g.constant(x.ge.clone()),
            &p,
            2,
            GesaVariant::ConIntraInter,
        )
        .unwrap();
        let gates =
            gate_scores(&g, g.constant(x.x.clone()), &p, GesaVariant::ConIntraInter).unwrap();
        let c = gates.value();
        o.require(
            c.len() == 3 && c.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
            || format!("gates {:?} are not a probability 3-vector", c.data()),
        );
        gate_err = gate_err.max((c.data().iter().sum::<f64>() - 1.0).abs());
        for s in row_sums(&combined_map(&maps, gates).unwrap().value()) {
            row_err = row_err.max((s - 1.0).abs());
        }

        // Con and Con+Intra reproduced by the full model with its extra gates closed.
        let (mut st, rich) = branch(GesaVariant::ConIntraInter, 2, 500 + seed);
        let x = xs(n, 8, 600 + seed);
        let zeroed = |mask_intra: bool| X {
            x: x.x.clone(),
            gi: if mask_intra {
                Tensor::zeros(&[n, 8])
            } else {
                x.gi.clone()
            },
            ge: Tensor::zeros(&[n, 8]),
        };
        let mut con = rich.clone();
        con.variant = GesaVariant::Con;
        let mut mid = rich.clone();
        mid.variant = GesaVariant::ConIntra;
        let biases: Vec<_> = rich.layers.iter().map(|l| l.gate.b.unwrap()).collect();
        let original: Vec<Tensor> = biases.iter().map(|&b| st.get(b).clone()).collect();
        for (&b, t) in biases.iter().zip(&original) {
            st.set(b, Tensor::vector(vec![t.data()[0], -1e9, -1e9]))
                .unwrap();
        }
        let a = run_branch(&st, &rich, &zeroed(true)) == run_branch(&st, &con, &x);
        for (&b, t) in biases.iter().zip(&original) {
            st.set(b, Tensor::vector(vec![t.data()[0], t.data()[1], -1e9]))
                .unwrap();
        }
        let b = run_branch(&st, &rich, &zeroed(false)) == run_branch(&st, &mid, &x);
        contained += usize::from(a && b);
    }
    o.note(format!(
        "20 instances: |gate sum - 1| <= {gate_err:.1e}, |combined row - 1| <= {row_err:.1e}, exact containment {contained}/20"
    ));
    o.require(gate_err <= 1e-9, || {
        format!("gates sum off by {gate_err:e}")
    });
    o.require(row_err <= 1e-9, || {
        format!("combined rows off by {row_err:e}")
    });
    o.require(contained == 20, || {
        format!("containment held in {contained} of 20")
    });
}

fn oracle_equivalence(o: &mut Outcome) {
    const TOL: f64 = 1e-12;
    const CASES: u64 = 20;
    let mut worst = [0.0f64; 3];

    for seed in 0..CASES {
        let mut r = rng(70 + seed);
        let (n, m) = (r.random_range(1..5), r.random_range(1..5));
        let (d, er) = ([4, 6][r.random_range(0..2)], r.random_range(1..4));
        let (store, c) = common::fusion::cell(d, er, 100 + seed);
        let x = common::fusion::inputs(n, m, d, 200 + seed);
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        let (qc, kc) = (g.constant(x.qc.clone()), g.constant(x.kc.clone()));
        let kg = g.constant(x.kg.clone());
        let pair =
            attention_scores(&g, qc, kc, g.constant(x.qg.clone()), kg, &c, FusionBase::CG).unwrap();
        let weights = combined_weights(&pair, false).unwrap();
        let fused = attend_and_fuse(&g, qc, kc, weights, &c).unwrap();
        let geo_map = pair.geometry.unwrap();
        let inter = inter_geometry(geo_map, kg).unwrap();

        let con = common::fusion::oracle_scorer(&store, &c.content, &to_m(&x.qc), &to_m(&x.kc));
        let geo = common::fusion::oracle_scorer(&store, &c.geometry, &to_m(&x.qg), &to_m(&x.kg));
        let fuse = common::fusion::oracle_fuse(
            &store,
            &c,
            &to_m(&x.qc),
            &to_m(&x.kc),
            &common::add(&con, &geo),
            er,
        );
        let kgm = to_m(&x.kg);
        let inter_o: M = geo
            .iter()
            .map(|row| {
                (0..d)
                    .map(|j| row.iter().zip(&kgm).map(|(a, k)| a * k[j]).sum())
                    .collect()
            })
            .collect();
        for e in [
            max_diff(&con, &pair.content.unwrap().value()),
            max_diff(&geo, &geo_map.value()),
            max_diff(&fuse, &fused.value()),
            max_diff(&inter_o, &inter.value()),
        ] {
            worst[0] = worst[0].max(e);
        }
    }

    for seed in 0..CASES {
        use common::gesa::{head_slice, layer, oracle_gates, oracle_layer, oracle_maps, xs};
        let (d, n) = ([4, 8][(seed % 2) as usize], 1 + (seed % 4) as usize);
        let (store, p) = layer(d, 700 + seed);
        let x = xs(n, d, 800 + seed);
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        let (xv, gi, ge) = (
            g.constant(x.x.clone()),
            g.constant(x.gi.clone()),
            g.constant(x.ge.clone()),
        );
        let maps = gesa_attention_maps(&g, xv, gi, ge, &p, 2, GesaVariant::ConIntraInter).unwrap();
        let expect = oracle_maps(&store, &p, &x, 2);
        for (k, map) in maps.iter().enumerate() {
            let t = map.unwrap().value();
            for h in 0..2 {
                worst[1] = worst[1].max(max_diff(&expect[k][h], &head_slice(&t, h)));
            }
        }
        let (out, trace) = gesa_layer(&g, xv, gi, ge, &p, 2, GesaVariant::ConIntraInter).unwrap();
        let gates = oracle_gates(&store, &p, &to_m(&x.x));
        worst[1] = worst[1].max(max_diff(&vec![gates], &trace.gates.value()));
        worst[1] = worst[1].max(max_diff(&oracle_layer(&store, &p, &x, 2), &out.value()));
    }

    for seed in 0..CASES {
        use common::decoder::{
            bind, branch_inputs, layer, oracle_cross, oracle_sigmoid_modulation,
        };
        let ids = [BranchId::VV, BranchId::SV, BranchId::SS];
        let (store, l) = layer(8, 2, &ids, 900 + seed);
        let sizes: Vec<(BranchId, usize)> = ids
            .iter()
            .enumerate()
            .map(|(i, &b)| (b, 1 + (seed as usize + i) % 4))
            .collect();
        let xs = branch_inputs(1000 + seed, 8, &sizes);
        let y = uniform(&mut rng(1100 + seed), &[1 + (seed % 5) as usize, 8]);
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        let cross = cross_attend(
            &g,
            g.constant(y.clone()),
            g.constant(xs[0].1.clone()),
            &l.cross,
        )
        .unwrap();
        worst[2] = worst[2].max(max_diff(
            &oracle_cross(&store, &l, &to_m(&y), &to_m(&xs[0].1)),
            &cross.value(),
        ));
        let (sum, alphas) = modulated_multi_input(
            &g,
            g.constant(y.clone()),
            &bind(&g, &xs),
            &l,
            Modulation::Sigmoid,
        )
        .unwrap();
        let (expect, expect_alphas) = oracle_sigmoid_modulation(&store, &l, &to_m(&y), &xs);
        worst[2] = worst[2].max(max_diff(&expect, &sum.value()));
        for (a, e) in alphas.iter().zip(&expect_alphas) {
            worst[2] = worst[2].max(max_diff(e, &a.1.value()));
        }
    }

    o.note(format!(
        "{CASES} instances per group, max |diff|: fusion {:.1e}, GESA {:.1e}, decoder {:.1e} (tol {TOL:e})",
        worst[0], worst[1], worst[2]
    ));
    for (name, w) in ["fusion", "GESA", "decoder"].iter().zip(worst) {
        o.require(w <= TOL, || {
            format!("{name} differs from its oracle by {w:e}")
        });
    }
}

fn decoder_contracts(o: &mut Outcome) {
    use common::decoder::{bind, decoder, exhaustive, memory, opts, TableScorer, Trap, VOCAB};
    let (store, dec) = decoder(21, 2);
    let xs = memory();
    let base = [BOS, 4, 5, 6, 3];
    let run = |tokens: &[usize]| {
        let tape = Tape::new();
        let g = Graph::frozen(&tape, &store);
        (*dec.forward(&g, tokens, &bind(&g, &xs)).unwrap().value()).clone()
    };
    let reference = run(&base);
    let (mut leaks, mut probes) = (0, 0);
    for j in 1..base.len() {
        for tok in 0..VOCAB {
            let mut changed = base;
            changed[j] = tok;
            let out = run(&changed);
            probes += 1;
            if (0..j).any(|t| (0..VOCAB).any(|k| out.at(t, k) != reference.at(t, k))) {
                leaks += 1;
            }
        }
    }
    o.require(leaks == 0, || {
        format!("{leaks} of {probes} substitutions changed an earlier row")
    });

    let mut same = 0;
    for seed in 0..50 {
        let s = TableScorer {
            seed,
            vocab: 6,
            sharpness: 4.0,
        };
        let p = opts(1, 8);
        same += usize::from(beam_search(&s, 1, p).unwrap() == greedy_decode(&s, p).unwrap());
    }
    o.require(same == 50, || {
        format!("beam 1 equals greedy in {same} of 50")
    });

    let p = gevst::decoder::DecodeOptions {
        bos: 0,
        eos: 0,
        max_len: 3,
    };
    let all = exhaustive(&Trap, p);
    let beam = beam_search(&Trap, 2, p).unwrap();
    let greedy = greedy_decode(&Trap, p).unwrap();
    let matches = beam.tokens == all[0].0 && (beam.normalized_score() - all[0].1).abs() < 1e-12;
    o.require(matches, || {
        format!(
            "beam 2 found {:?}, exhaustive best {:?}",
            beam.tokens, all[0].0
        )
    });
    o.note(format!(
        "T=5 causality over {probes} substitutions, {same}/50 beam-1 decodes equal greedy, beam 2 on the 3-token trap picks {:?} (greedy {:?}) of {} sequences",
        beam.tokens,
        greedy.tokens,
        all.len()
    ));
}

fn metric_oracles(o: &mut Outcome) {
    use common::metrics::{brute_lcs, cases, oracle_bleu, oracle_cider, oracle_rouge};
    let mut worst = [0.0f64; 3];
    let (cands, refs) = cases(31);
    let cider = CiderD::new(&refs);
    for (c, r) in cands.iter().zip(&refs) {
        for n in 1..=4 {
            worst[0] = worst[0].max((bleu(c, r, n) - oracle_bleu(c, r, n)).abs());
        }
        o.require(
            r.iter()
                .all(|x| gevst::metrics::lcs_len(c, x) == brute_lcs(c, x)),
            || "LCS mismatch".into(),
        );
        worst[1] = worst[1].max((rouge_l(c, r) - oracle_rouge(c, r)).abs());
        worst[2] = worst[2].max((cider.score(c, r) - oracle_cider(&refs, c, r)).abs());
    }
    for (name, w) in ["BLEU", "ROUGE-L", "CIDEr-D"].iter().zip(worst) {
        o.require(w <= 1e-9, || {
            format!("{name} differs from its oracle by {w:e}")
        });
    }

    // Identical candidate and reference, with n-grams rare enough to carry weight.
    let docs: Vec<Vec<Vec<u8>>> = (0..5u8)
        .map(|i| vec![(0..6).map(|k| 10 * i + k).collect()])
        .collect();
    let scorer = CiderD::new(&docs);
    let mut exact = true;
    for d in &docs {
        let s = &d[0];
        exact &= (1..=4).all(|n| bleu(s, d, n) == 1.0)
            && rouge_l(s, d) == 1.0
            && scorer.score(s, d) == 10.0;
    }
    let corpus = evaluate(
        &docs.iter().map(|d| d[0].clone()).collect::<Vec<_>>(),
        &docs,
    );
    exact &= corpus.bleu4 == 1.0 && corpus.rouge_l == 1.0 && corpus.cider_d == 10.0;
    o.require(exact, || {
        "identical sentences do not score exactly 1, 1 and 10".into()
    });
    o.note(format!(
        "20 random cases, max |diff|: BLEU-1..4 {:.1e}, ROUGE-L {:.1e}, CIDEr-D {:.1e}; identical sentences exact: {exact}",
        worst[0], worst[1], worst[2]
    ));
}

struct Trained {
    model: Gevst,
    store: ParamStore,
    vocab: gevst::vocab::Vocabulary,
    train: Vec<PreparedSample>,
    cfg: TrainConfig,
}

fn learning_capability(o: &mut Outcome) -> Trained {
    let samples = generate_dataset(7, 50).unwrap();
    let cfg = TrainConfig {
        xe_epochs: 500,
        early_stop_loss: Some(0.01),
        val_fraction: 0.0,
        ..TrainConfig::default()
    };
    let vocab = corpus_vocabulary(&samples, cfg.min_count);
    let train: Vec<PreparedSample> = samples
        .iter()
        .map(|s| PreparedSample::new(s, &vocab).unwrap())
        .collect();
    let (model, mut store) = Gevst::new(&cfg.model, vocab.len(), cfg.seed).unwrap();
    let t0 = Instant::now();
    let out = train_xe(&model, &mut store, &train, &[], &cfg, &mut |_| {}).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let last = out.epochs.last().unwrap();
    let (tf_loss, tf_acc) = teacher_forcing_stats(&model, &store, &train, cfg.xe_targets).unwrap();
    let cider = greedy_cider(&model, &store, &train).unwrap();
    o.note(format!(
        "d_o={} after {} epochs in {secs:.0} s: teacher-forcing accuracy {:.4}, loss {tf_loss:.4} (last epoch {:.4}), greedy CIDEr-D {cider:.3}",
        cfg.model.d_model,
        out.epochs.len(),
        tf_acc,
        last.loss
    ));
    o.require(tf_acc >= 0.99, || format!("accuracy {tf_acc:.4} < 0.99"));
    o.require(tf_loss < 0.05, || format!("loss {tf_loss:.4} >= 0.05"));
    o.require(out.epochs.len() <= 500, || "more than 500 epochs".into());
    o.require(secs < 600.0, || format!("training took {secs:.0} s"));
    o.require(cider >= 8.0, || format!("CIDEr-D {cider:.3} < 8.0"));
    Trained {
        model,
        store,
        vocab,
        train,
        cfg,
    }
}

fn scst_sanity(o: &mut Outcome, xe: Option<Trained>) {
    use common::policy::{log_softmax, Bandit};
    let mut store = ParamStore::new();
    let theta = store.add("theta", Tensor::vector(vec![0.0, 0.0]));
    let policy = Bandit { theta };
    let reward = |_: &(), t: &[usize]| if t[1] == 1 { 10.0 } else { 0.0 };
    let mut adam = Adam::new(&store, 0.9, 0.98, 1e-9);
    let mut r = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..200 {
        scst_step(
            &policy,
            &mut store,
            &[&()],
            &reward,
            &mut adam,
            0.05,
            5.0,
            1,
            &mut r,
        )
        .unwrap();
    }
    let p = log_softmax(store.get(theta).data())[1].exp();
    o.require(p > 0.9, || format!("bandit probability {p:.3} <= 0.9"));
    o.require(policy.greedy(&store, &()).unwrap() == vec![0, 1], || {
        "bandit greedy action is not the rewarded one".into()
    });
    o.note(format!("bandit p(rewarded) after 200 steps {p:.4}"));

    let Some(xe) = xe else {
        o.require(false, || "no XE model to start from".into());
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("xe.ckpt");
    save_checkpoint(&path, &xe.model.config, &xe.vocab, &xe.store).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let before = greedy_cider(&ck.model, &ck.store, &xe.train).unwrap();
    let mut store = ck.store;
    let cfg = TrainConfig {
        scst_epochs: 30,
        ..xe.cfg
    };
    train_scst(&ck.model, &mut store, &xe.train, &cfg, &mut |_| {}).unwrap();
    let after = greedy_cider(&ck.model, &store, &xe.train).unwrap();
    o.note(format!(
        "30 SCST epochs from the XE checkpoint: training CIDEr-D {before:.4} -> {after:.4}"
    ));
    o.require(after >= before - 0.2, || {
        format!("CIDEr-D dropped by {:.4}", before - after)
    });
}

fn gevst(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gevst"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn gevst")
}

fn run_ok(o: &mut Outcome, args: &[&str]) -> bool {
    let out = gevst(args);
    let ok = out.status.success();
    o.require(ok, || {
        format!(
            "gevst {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        )
    });
    ok
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "model": {"d_model": 16, "heads": 2, "expansion_rate": 2, "fusion_cells": 1, "layers": 2,
            "dc_width": 16, "dc_heads": 2, "dc_layers": 1},
  "xe_epochs": 2, "scst_epochs": 2, "warmup_epochs": 1, "batch_size": 4, "min_count": 1, "val_fraction": 0.25, "beam": 2
}"#;

const ABLATION: &str = r#"{
  "model": {"d_model": 32, "heads": 4, "expansion_rate": 2, "fusion_cells": 1, "layers": 2,
            "dc_width": 32, "dc_heads": 2, "dc_layers": 1},
  "xe_epochs": 8, "warmup_epochs": 2, "beam": 3
}"#;

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap_or_default()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

fn ablation_mechanics(o: &mut Outcome) {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (small, large) = (root.join("small.jsonl"), root.join("large.jsonl"));
    let (tiny, sweep) = (root.join("tiny.json"), root.join("ablation.json"));
    std::fs::write(&tiny, TINY).unwrap();
    std::fs::write(&sweep, ABLATION).unwrap();
    if !(run_ok(
        o,
        &["gen-data", "--seed", "7", "--n", "16", "--out", p(&small)],
    ) && run_ok(
        o,
        &["gen-data", "--seed", "7", "--n", "500", "--out", p(&large)],
    )) {
        return;
    }
    let all = "SS+SV+VS+VV";
    let grids: [(&str, Vec<(&str, &str)>); 5] = [
        ("m", vec![("1", all), ("2", all), ("3", all)]),
        ("base", vec![("C", all), ("G", all), ("CG", all)]),
        (
            "layers",
            vec![("2", all), ("3", all), ("4", all), ("5", all)],
        ),
        (
            "branches",
            vec![
                ("SS", "SS"),
                ("SV", "SV"),
                ("VS", "VS"),
                ("VV", "VV"),
                ("+VS", "VS+VV"),
                ("+SV", "SV+VS+VV"),
                ("+SS", all),
            ],
        ),
        ("gesa", vec![("Con", all), ("+Intra", all), ("+Inter", all)]),
    ];
    let mut directional = String::from("not run");
    for (axis, expect) in &grids {
        let (data, cfg) = if *axis == "gesa" {
            (&large, &sweep)
        } else {
            (&small, &tiny)
        };
        let out = root.join(format!("ablate_{axis}"));
        if !run_ok(
            o,
            &[
                "ablate",
                "--data",
                p(data),
                "--axis",
                axis,
                "--config",
                p(cfg),
                "--out",
                p(&out),
            ],
        ) {
            continue;
        }
        let rows = read_csv(&out.join(format!("ablation_{axis}.csv")));
        o.require(
            rows.first().map(|h| h.join(",")).as_deref()
                == Some("label,branches,bleu4,rouge_l,cider_d,best_epoch"),
            || format!("{axis}: unexpected CSV header"),
        );
        let got: Vec<(String, String)> = rows
            .iter()
            .skip(1)
            .map(|r| (r[0].clone(), sorted_set(&r[1])))
            .collect();
        let want: Vec<(String, String)> = expect
            .iter()
            .map(|(l, b)| (l.to_string(), b.to_string()))
            .collect();
        o.require(got == want, || {
            format!("{axis}: grid {got:?}, expected {want:?}")
        });
        let complete = rows.iter().skip(1).all(|r| {
            r.len() == 6
                && r[2..5]
                    .iter()
                    .all(|v| v.parse::<f64>().is_ok_and(f64::is_finite))
                && r[5].parse::<usize>().is_ok()
        });
        o.require(complete, || format!("{axis}: incomplete table rows"));
        let md =
            std::fs::read_to_string(out.join(format!("ablation_{axis}.md"))).unwrap_or_default();
        let md_rows = md.lines().filter(|l| l.starts_with('|')).count();
        o.require(md_rows == expect.len() + 2, || {
            format!("{axis}: markdown table has {md_rows} lines")
        });
        if *axis == "gesa" {
            directional = md
                .lines()
                .find(|l| l.starts_with("+Inter >= Con"))
                .map(str::to_string)
                .unwrap_or_else(|| "missing from the table".into());
            o.require(
                directional.contains("PASS") || directional.contains("INVESTIGATE"),
                || "directional check not reported".into(),
            );
        }
    }
    o.note(format!("grids m/base/layers/branches/gesa match with complete CSV and markdown tables; 500-sample sweep: {directional}"));
}

fn sorted_set(s: &str) -> String {
    let mut v: Vec<&str> = s.split('+').collect();
    v.sort_unstable();
    v.join("+")
}

/// Runs every command into `dir` and returns the produced files except manifests.
fn run_pipeline(o: &mut Outcome, dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let cfg = dir.join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let data = dir.join("data.jsonl");
    let xe = dir.join("xe");
    let scst = dir.join("scst");
    let caps = dir.join("captions.jsonl");
    let metrics = dir.join("metrics.json");
    let dump = dir.join("dump");
    let abl = dir.join("ablate");
    let steps: Vec<Vec<&str>> = vec![
        vec!["gen-data", "--seed", "11", "--n", "16", "--out", p(&data)],
        vec![
            "train",
            "--data",
            p(&data),
            "--phase",
            "xe",
            "--config",
            p(&cfg),
            "--out",
            p(&xe),
        ],
        vec![
            "train",
            "--data",
            p(&data),
            "--phase",
            "scst",
            "--config",
            p(&cfg),
            "--init",
            "XE_CKPT",
            "--out",
            p(&scst),
        ],
        vec![
            "caption",
            "--ckpt",
            "SCST_CKPT",
            "--data",
            p(&data),
            "--beam",
            "3",
            "--out",
            p(&caps),
        ],
        vec![
            "eval",
            "--pred",
            p(&caps),
            "--refs",
            p(&data),
            "--out",
            p(&metrics),
        ],
        vec![
            "dump-attention",
            "--ckpt",
            "SCST_CKPT",
            "--data",
            p(&data),
            "--sample-id",
            "3",
            "--out",
            p(&dump),
        ],
        vec![
            "ablate",
            "--data",
            p(&data),
            "--axis",
            "base",
            "--config",
            p(&cfg),
            "--out",
            p(&abl),
        ],
    ];
    let (xe_ckpt, scst_ckpt) = (xe.join("model.ckpt"), scst.join("model.ckpt"));
    for step in steps {
        let args: Vec<&str> = step
            .iter()
            .map(|a| match *a {
                "XE_CKPT" => p(&xe_ckpt),
                "SCST_CKPT" => p(&scst_ckpt),
                other => other,
            })
            .collect();
        if !run_ok(o, &args) {
            break;
        }
    }
    let mut files = BTreeMap::new();
    collect(dir, dir, &mut files);
    files
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect(root, &path, out);
        } else if !path.to_string_lossy().ends_with("manifest.json") {
            let rel = path
                .strip_prefix(root)
                .unwrap()
                .to_string_lossy()
                .into_owned();
            out.insert(rel, std::fs::read(&path).unwrap());
        }
    }
}

fn reproducibility(o: &mut Outcome) {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_pipeline(o, a.path());
    let second = run_pipeline(o, b.path());
    let differing: Vec<&String> = first
        .keys()
        .filter(|k| second.get(*k) != first.get(*k))
        .collect();
    let kinds: BTreeMap<&str, usize> = first.keys().fold(BTreeMap::new(), |mut m, k| {
        *m.entry(k.rsplit('.').next().unwrap_or("")).or_default() += 1;
        m
    });
    o.require(first.keys().eq(second.keys()), || {
        "the two runs produced different file sets".into()
    });
    o.require(differing.is_empty(), || {
        format!("differing outputs: {differing:?}")
    });
    o.require(
        first.keys().any(|k| k.ends_with(".ckpt")) && first.len() >= 12,
        || format!("only {} outputs were produced", first.len()),
    );
    o.note(format!(
        "gen-data, train xe, train scst, caption, eval, dump-attention and ablate run twice: {} outputs {kinds:?}, {} differ",
        first.len(),
        differing.len()
    ));
}

fn main() {
    let start = Instant::now();
    let mut all = true;
    let mut xe = None;
    let criteria: [(&str, &str); 10] = [
        (
            "gradient",
            "gradient correctness of the full miniature model",
        ),
        ("fusion", "fusion invariants"),
        ("gesa", "GESA invariants"),
        ("oracle", "oracle equivalence"),
        ("decoder", "decoder contracts"),
        ("metrics", "metric oracles"),
        ("learning", "learning capability"),
        ("scst", "SCST sanity"),
        ("ablation", "ablation mechanics"),
        ("repro", "reproducibility"),
    ];
    for (i, (key, title)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let mut o = Outcome::default();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| match *key {
            "gradient" => gradient_correctness(&mut o),
            "fusion" => fusion_invariants(&mut o),
            "gesa" => gesa_invariants(&mut o),
            "oracle" => oracle_equivalence(&mut o),
            "decoder" => decoder_contracts(&mut o),
            "metrics" => metric_oracles(&mut o),
            "learning" => xe = Some(learning_capability(&mut o)),
            "scst" => scst_sanity(&mut o, xe.take()),
            "ablation" => ablation_mechanics(&mut o),
            "repro" => reproducibility(&mut o),
            _ => unreachable!(),
        }));
        if result.is_err() {
            o.failures.push("panicked".into());
        }
        all &= report(i + 1, title, &o, t.elapsed().as_secs_f64());
    }
    println!(
        "acceptance: {} in {:.0} s",
        if all { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    if !all {
        std::process::exit(1);
    }
}
