// SPDX-License-Identifier: MIT OR Apache-2.0

//! One function per command. Each reads its inputs, writes into an
//! [`OutDir`] and finishes with the run manifest.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use rayon::prelude::*;
use truthx::dataio::{
    extract_reps, gen_synthetic_world, load_triplets, read_qa_csv, write_triplets, RepBank,
    Triplet, Vocab,
};
use truthx::evalkit::{
    report_csv, report_lines, report_table, score_choices, sign_test_p, truth_flip_rate,
    Mc2Variant, McQuestion, McReport, ScoredQuestion,
};
use truthx::gradcheck::{run_all, suite_config};
use truthx::probe::{
    compute_direction, make_control_direction, select_sites, site_accuracy, ControlKind, Direction,
    EditPlan, SiteScore, TruthXEditor,
};
use truthx::toylm::{lm_train, EditScope, ToyLmParams};
use truthx::trainer::{
    run_ablation_grid, train_folds, AblationFlag, TrainConfig, TrainHistory, TrainRun,
    TrainedTruthX,
};
use truthx::{Error, ProbeSite};

use crate::error::{CliError, CliResult};
use crate::lmconfig::LmConfig;
use crate::manifest::{Inputs, OutDir, RunManifest, MANIFEST_NAME};
use crate::{
    AblateArgs, Command, DirectionKind, ExtractArgs, GenDataArgs, GradcheckArgs, McEvalArgs,
    ProbeArgs, ReplayArgs, ScopeArg, SelectArgs, SweepArgs, TrainLmArgs, TrainTruthxArgs,
};

pub const SCORES_HEADER: &str = "site\taccuracy\tcount\trank";

pub fn dispatch(cmd: Command, args: &[String]) -> CliResult<()> {
    let name = cmd.name();
    match cmd {
        Command::GenData(a) => gen_data(name, args, a),
        Command::TrainLm(a) => train_lm(name, args, a),
        Command::Extract(a) => extract(name, args, a),
        Command::TrainTruthx(a) => train_truthx(name, args, a),
        Command::Probe(a) => probe(name, args, a),
        Command::Select(a) => select(name, args, a),
        Command::McEval(a) => mc_eval(name, args, a),
        Command::Sweep(a) => sweep(name, args, a),
        Command::Gradcheck(a) => gradcheck(name, args, a),
        Command::Ablate(a) => ablate(name, args, a),
        Command::Replay(a) => replay(a),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn join_lines<S: AsRef<str>>(lines: &[S]) -> String {
    let mut s = String::new();
    for l in lines {
        s.push_str(l.as_ref());
        s.push('\n');
    }
    s
}

fn load_vocab(path: &Path) -> CliResult<Vocab> {
    let text = read_text(path)?;
    let words = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    Ok(Vocab::new(words)?)
}

/// Config file if given, else defaults; `--seed` overrides the file's seed.
fn trainer_config(
    path: Option<&Path>,
    seed: Option<u64>,
    inputs: &mut Inputs,
) -> CliResult<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            inputs.add(p)?;
            TrainConfig::parse(&read_text(p)?)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Held-out ids of a checkpoint: its test fold, or its validation split
/// when it was trained without one.
fn heldout_ids(ckpt: &TrainedTruthX) -> &[u32] {
    if ckpt.splits.test.is_empty() {
        &ckpt.splits.val
    } else {
        &ckpt.splits.test
    }
}

fn heldout_bank(ckpt: &TrainedTruthX, bank: &RepBank) -> CliResult<RepBank> {
    let held = ckpt.standardize(&bank.subset(heldout_ids(ckpt)))?;
    if held.is_empty() {
        return Err(Error::Contract(
            "representation dump has no sample held out by this checkpoint".into(),
        )
        .into());
    }
    Ok(held)
}

fn gen_data(name: &str, args: &[String], a: GenDataArgs) -> CliResult<()> {
    let (world, corpus, triplets) = gen_synthetic_world(a.seed, a.entities, a.attributes)?;
    let vocab = world.vocab();
    let mut out = OutDir::create(&a.out)?;
    out.write("corpus.txt", join_lines(&corpus))?;
    out.write("triplets.tsv", write_triplets(&triplets, &vocab))?;
    out.write("vocab.txt", join_lines(vocab.words()))?;
    println!(
        "{} corpus lines, {} triplets, {} words",
        corpus.len(),
        triplets.len(),
        vocab.len()
    );
    out.finish(name, args, Some(a.seed), None, Inputs::default())?;
    Ok(())
}

fn train_lm(name: &str, args: &[String], a: TrainLmArgs) -> CliResult<()> {
    let mut inputs = Inputs::default();
    inputs.add(&a.corpus)?;
    inputs.add(&a.vocab)?;
    let cfg = match &a.config {
        Some(p) => {
            inputs.add(p)?;
            LmConfig::parse(&read_text(p)?)?
        }
        None => LmConfig::default(),
    };
    let seed = a.seed.or(cfg.seed).unwrap_or(0);
    let vocab = load_vocab(&a.vocab)?;
    let corpus = read_text(&a.corpus)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            vocab.encode(l).map_err(|e| match e {
                Error::Data { msg, .. } => Error::Data { line: i + 1, msg },
                other => other,
            })
        })
        .collect::<truthx::Result<Vec<_>>>()?;
    let (lm, history) = lm_train(
        &corpus,
        cfg.model(&vocab, seed)?,
        &cfg.training(&vocab, seed)?,
    )?;
    let mut out = OutDir::create(&a.out)?;
    lm.save(&out.path("lm.ckpt"), &vocab)?;
    out.record("lm.ckpt")?;
    let mut hist = String::from("epoch\tloss\n");
    for (i, l) in history.iter().enumerate() {
        hist.push_str(&format!("{i}\t{l}\n"));
    }
    out.write("lm_history.tsv", hist)?;
    if let Some(last) = history.last() {
        println!("final mean token loss {last:.6}");
    }
    out.finish(name, args, Some(seed), Some(cfg.to_text(seed)), inputs)?;
    Ok(())
}

fn extract(name: &str, args: &[String], a: ExtractArgs) -> CliResult<()> {
    let mut inputs = Inputs::default();
    inputs.add(&a.lm)?;
    inputs.add(&a.triplets)?;
    let (lm, vocab) = ToyLmParams::load(&a.lm)?;
    let triplets = load_triplets(&a.triplets, &vocab)?;
    let bank = extract_reps(&lm, &triplets, a.all_tokens)?;
    let mut out = OutDir::create(&a.out)?;
    bank.save(&out.path("reps.dump"))?;
    out.record("reps.dump")?;
    println!(
        "{} pairs from {} triplets over {} sites",
        bank.len(),
        triplets.len(),
        bank.sites().len()
    );
    out.finish(name, args, None, None, inputs)?;
    Ok(())
}

pub fn history_tsv(h: &TrainHistory) -> String {
    let mut s = String::from("epoch\ttotal\trecon\tctr\ttruth\tsem\tedit\tval_accuracy\n");
    for (i, (l, acc)) in h.losses.iter().zip(&h.val_accuracy).enumerate() {
        s.push_str(&format!(
            "{i}\t{}\t{}\t{}\t{}\t{}\t{}\t{acc}\n",
            l.l_total, l.l_recon, l.l_ctr, l.l_truth, l.l_sem, l.l_edit
        ));
    }
    s
}

/// Checkpoint and history of each fold plus a `folds.tsv` summary, under
/// `prefix` inside `out`.
fn write_folds(out: &mut OutDir, prefix: &str, runs: &[TrainRun]) -> CliResult<()> {
    let mut summary =
        String::from("fold\ttrain\tval\ttest\tinitial_val_accuracy\tfinal_val_accuracy\n");
    for (i, r) in runs.iter().enumerate() {
        let ck = format!("{prefix}fold{i}.ckpt");
        if let Some(dir) = out.path(&ck).parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        r.model.save(&out.path(&ck))?;
        out.record(&ck)?;
        out.write(
            &format!("{prefix}fold{i}_history.tsv"),
            history_tsv(&r.history),
        )?;
        let s = &r.model.splits;
        let last = r.history.val_accuracy.last().copied().unwrap_or(f64::NAN);
        summary.push_str(&format!(
            "{i}\t{}\t{}\t{}\t{}\t{last}\n",
            s.train.len(),
            s.val.len(),
            s.test.len(),
            r.history.initial_val_accuracy
        ));
        println!(
            "fold {i}: train {} val {} test {}, val accuracy {:.4} -> {last:.4}",
            s.train.len(),
            s.val.len(),
            s.test.len(),
            r.history.initial_val_accuracy
        );
    }
    out.write(&format!("{prefix}folds.tsv"), summary)?;
    Ok(())
}

fn train_truthx(name: &str, args: &[String], a: TrainTruthxArgs) -> CliResult<()> {
    let mut inputs = Inputs::default();
    inputs.add(&a.reps)?;
    let cfg = trainer_config(a.config.as_deref(), a.seed, &mut inputs)?;
    let bank = RepBank::load(&a.reps)?;
    let runs = train_folds(&bank, &cfg)?;
    let mut out = OutDir::create(&a.out)?;
    write_folds(&mut out, "", &runs)?;
    out.finish(name, args, Some(cfg.seed), Some(cfg.to_text()), inputs)?;
    Ok(())
}

pub fn scores_tsv(scores: &[SiteScore], counts: &[usize]) -> CliResult<String> {
    let ranking = select_sites(scores, scores.len())?;
    let mut s = format!("{SCORES_HEADER}\n");
    for (sc, n) in scores.iter().zip(counts) {
        let rank = ranking.iter().position(|x| *x == sc.site).unwrap_or(0) + 1;
        s.push_str(&format!("{}\t{}\t{n}\t{rank}\n", sc.site, sc.accuracy));
    }
    Ok(s)
}

pub fn read_scores(path: &Path) -> CliResult<Vec<SiteScore>> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SCORES_HEADER => {}
        _ => {
            return Err(Error::Data {
                line: 1,
                msg: format!("expected header `{SCORES_HEADER}`"),
            }
            .into())
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Data {
            line: i + 1,
            msg: msg.into(),
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 tab-separated fields").into());
        }
        let site: ProbeSite = f[0].parse().map_err(|_| bad("bad site"))?;
        let accuracy: f64 = f[1].parse().map_err(|_| bad("bad accuracy"))?;
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(bad("accuracy outside [0, 1]").into());
        }
        out.push(SiteScore { site, accuracy });
    }
    if out.is_empty() {
        return Err(Error::Data {
            line: 1,
            msg: "no site scores".into(),
        }
        .into());
    }
    Ok(out)
}

fn probe(name: &str, args: &[String], a: ProbeArgs) -> CliResult<()> {
    let mut inputs = Inputs::default();
    inputs.add(&a.checkpoint)?;
    inputs.add(&a.reps)?;
    let ckpt = TrainedTruthX::load(&a.checkpoint)?;
    let bank = RepBank::load(&a.reps)?;
    let held = heldout_bank(&ckpt, &bank)?;
    let mut scores = Vec::new();
    let mut counts = Vec::new();
    for site in held.sites() {
        let pairs: Vec<_> = held.at_site(site).collect();
        let pos: Vec<&[f64]> = pairs.iter().map(|p| p.x_pos.as_slice()).collect();
        let neg: Vec<&[f64]> = pairs.iter().map(|p| p.x_neg.as_slice()).collect();
        scores.push(site_accuracy(
            &ckpt.params,
            site,
            &pos,
            &neg,
            &ckpt.centroids,
        )?);
        counts.push(2 * pairs.len());
    }
    let tsv = scores_tsv(&scores, &counts)?;
    print!("{tsv}");
    let mut out = OutDir::create(&a.out)?;
    out.write("scores.tsv", tsv)?;
    out.finish(name, args, None, None, inputs)?;
    Ok(())
}

fn directed(kind: DirectionKind, d: &Direction, seed: u64) -> CliResult<Direction> {
    let out = match kind {
        DirectionKind::Truthful => d.clone(),
        DirectionKind::Negated => make_control_direction(ControlKind::Negated, d, seed)?,
        DirectionKind::Random => make_control_direction(ControlKind::Random, d, seed)?,
        DirectionKind::Orthogonal => make_control_direction(ControlKind::Orthogonal, d, seed)?,
    };
    if !out.is_usable() {
        return Err(Error::Degenerate("editing direction is zero".into()).into());
    }
    Ok(out)
}

fn select(name: &str, args: &[String], a: SelectArgs) -> CliResult<()> {
    let mut inputs = Inputs::default();
    inputs.add(&a.scores)?;
    inputs.add(&a.checkpoint)?;
    let scores = read_scores(&a.scores)?;
    let ckpt = TrainedTruthX::load(&a.checkpoint)?;
    let k = a.k.unwrap_or(scores.len().min(10));
    let sites = select_sites(&scores, k)?;
    let global = directed(a.direction, &compute_direction(&ckpt.centroids), a.seed)?;
    let mut plan = EditPlan::new(
        sites.clone(),
        a.alpha,
        global,
        a.checkpoint.display().to_string(),
    )?;
    if a.per_site {
        for s in sites {
            let c = ckpt.site_centroids.get(&s).ok_or_else(|| {
                Error::Contract(format!("checkpoint has no centroids for site {s}"))
            })?;
            plan.site_directions
                .push((s, directed(a.direction, &compute_direction(c), a.seed)?));
        }
    }
    let mut out = OutDir::create(&a.out)?;
    plan.save(&out.path("plan.editplan"))?;
    out.record("plan.editplan")?;
    println!(
        "k = {k}, alpha = {}, sites {}",
        a.alpha,
        plan.sites
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    out.finish(name, args, Some(a.seed), None, inputs)?;
    Ok(())
}

fn load_questions(
    triplets: Option<&Path>,
    qa_csv: Option<&Path>,
    vocab: &Vocab,
    inputs: &mut Inputs,
) -> CliResult<Vec<McQuestion>> {
    if let Some(p) = triplets {
        inputs.add(p)?;
        return Ok(load_triplets(p, vocab)?
            .iter()
            .map(McQuestion::from_triplet)
            .collect());
    }
    let p = qa_csv.ok_or_else(|| CliError::Usage("need --triplets or --qa-csv".into()))?;
    inputs.add(p)?;
    let f = fs::File::open(p).map_err(|e| CliError::io(p, e))?;
    let rows = read_qa_csv(BufReader::new(f))?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| Ok(McQuestion::from_qa_row(i as u32, r, vocab)?))
        .collect()
}

fn load_plan(path: &Path, inputs: &mut Inputs) -> CliResult<(EditPlan, TrainedTruthX)> {
    inputs.add(path)?;
    let plan = EditPlan::load(path)?;
    let ck = Path::new(&plan.checkpoint);
    inputs.add(ck)?;
    let ckpt = TrainedTruthX::load(ck)?;
    Ok((plan, ckpt))
}

fn score_all(
    lm: &ToyLmParams,
    editor: Option<&TruthXEditor<'_>>,
    scope: ScopeArg,
    qs: &[McQuestion],
    per_token: bool,
) -> CliResult<Vec<ScoredQuestion>> {
    Ok(qs
        .par_iter()
        .map(|q| {
            let sc = match scope {
                ScopeArg::All => EditScope::AllPositions,
                ScopeArg::Answer => EditScope::FromPosition(q.question.len()),
            };
            let e = editor.map(|e| (e as &dyn truthx::toylm::SiteEditor, sc));
            score_choices(lm, e, q, per_token)
        })
        .collect::<truthx::Result<Vec<_>>>()?)
}

fn join_scores(s: &[f64]) -> String {
    s.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn mc_eval(name: &str, args: &[String], a: McEvalArgs) -> CliResult<()> {
    let variant: Mc2Variant = a.mc2.parse()?;
    let mut inputs = Inputs::default();
    inputs.add(&a.lm)?;
    let (lm, vocab) = ToyLmParams::load(&a.lm)?;
    let mut qs = load_questions(
        a.triplets.as_deref(),
        a.qa_csv.as_deref(),
        &vocab,
        &mut inputs,
    )?;
    let plan = match &a.plan {
        Some(p) => Some(load_plan(p, &mut inputs)?),
        None => None,
    };
    if a.heldout {
        let (_, ckpt) = plan
            .as_ref()
            .ok_or_else(|| CliError::Usage("--heldout needs --plan".into()))?;
        let ids = heldout_ids(ckpt);
        qs.retain(|q| ids.contains(&q.id));
    }
    if qs.is_empty() {
        return Err(Error::Contract("no questions to evaluate".into()).into());
    }
    let base = score_all(&lm, None, a.scope, &qs, a.per_token)?;
    let edited = match &plan {
        Some((p, ckpt)) => {
            let ed = TruthXEditor {
                params: &ckpt.params,
                standardizer: &ckpt.standardizer,
                plan: p,
            };
            score_all(&lm, Some(&ed), a.scope, &qs, a.per_token)?
        }
        None => base.clone(),
    };

    let mut rows = McReport::new(edited.clone(), variant).rows();
    let mut per_q = String::from("id\tbase_margin\tedited_margin\tscores\n");
    let mut up = 0usize;
    for (b, e) in base.iter().zip(&edited) {
        up += usize::from(e.margin() > b.margin());
        per_q.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            e.id,
            b.margin(),
            e.margin(),
            join_scores(&e.scores)
        ));
    }
    if plan.is_some() {
        for (m, v, x) in McReport::new(base, variant).rows() {
            rows.push((format!("base_{m}"), v, x));
        }
        let n = edited.len();
        rows.push(("margin_up".into(), "fraction".into(), up as f64 / n as f64));
        rows.push(("margin_up".into(), "sign_test_p".into(), sign_test_p(up, n)));
    }
    print!("{}", report_table(&rows));
    let mut out = OutDir::create(&a.out)?;
    out.write("report.txt", report_lines(&rows))?;
    out.write("questions.tsv", per_q)?;
    if a.csv {
        out.write("report.csv", report_csv(&rows))?;
    }
    out.finish(name, args, None, None, inputs)?;
    Ok(())
}

fn sweep(name: &str, args: &[String], a: SweepArgs) -> CliResult<()> {
    let variant: Mc2Variant = a.mc2.parse()?;
    let mut inputs = Inputs::default();
    let (template, ckpt) = load_plan(&a.plan, &mut inputs)?;
    inputs.add(&a.scores)?;
    inputs.add(&a.reps)?;
    let scores = read_scores(&a.scores)?;
    let held = heldout_bank(&ckpt, &RepBank::load(&a.reps)?)?;
    let ks = if a.ks.is_empty() {
        vec![template.sites.len()]
    } else {
        a.ks.clone()
    };
    if a.alphas.is_empty() {
        return Err(CliError::Usage("--alphas is empty".into()));
    }
    let lm_qs = match (&a.lm, &a.triplets) {
        (Some(lm_path), Some(tp)) => {
            inputs.add(lm_path)?;
            inputs.add(tp)?;
            let (lm, vocab) = ToyLmParams::load(lm_path)?;
            let ids = heldout_ids(&ckpt);
            let qs: Vec<McQuestion> = load_triplets(tp, &vocab)?
                .iter()
                .filter(|t: &&Triplet| ids.contains(&t.id))
                .map(McQuestion::from_triplet)
                .collect();
            if qs.is_empty() {
                return Err(Error::Contract("no held-out questions".into()).into());
            }
            Some((lm, qs))
        }
        _ => None,
    };

    let mut grid = String::from("alpha\tk\tflip\tbaseline\tmc1\tmc2\tmc3\n");
    for &alpha in &a.alphas {
        for &k in &ks {
            let plan = EditPlan {
                sites: select_sites(&scores, k)?,
                alpha,
                ..template.clone()
            };
            plan.validate()?;
            let (flip, baseline) = truth_flip_rate(&ckpt.params, &ckpt.centroids, &plan, &held)?;
            let mc = match &lm_qs {
                Some((lm, qs)) => {
                    let ed = TruthXEditor {
                        params: &ckpt.params,
                        standardizer: &ckpt.standardizer,
                        plan: &plan,
                    };
                    let r =
                        McReport::new(score_all(lm, Some(&ed), ScopeArg::All, qs, false)?, variant);
                    format!("{}\t{}\t{}", r.mc1, r.mc2, r.mc3)
                }
                None => "-\t-\t-".into(),
            };
            println!("alpha {alpha} k {k}: flip {flip:.4} (baseline {baseline:.4})");
            grid.push_str(&format!("{alpha}\t{k}\t{flip}\t{baseline}\t{mc}\n"));
        }
    }
    let mut out = OutDir::create(&a.out)?;
    out.write("grid.tsv", grid)?;
    out.finish(name, args, None, None, inputs)?;
    Ok(())
}

fn gradcheck(name: &str, args: &[String], a: GradcheckArgs) -> CliResult<()> {
    let cfg = suite_config();
    let report = run_all(a.seed, a.seeds, a.corrupt, cfg)?;
    for (suite, worst) in report.worst_by_suite() {
        println!("{suite:<8} max relative error {worst:.3e}");
    }
    let mut out = OutDir::create(&a.out)?;
    out.write("gradcheck.tsv", report.to_tsv())?;
    let config = format!(
        "step = {:e}\ntol = {:e}\nfloor = {:e}\nseeds = {}\ncorrupt = {}\n",
        cfg.step, cfg.tol, cfg.floor, a.seeds, a.corrupt
    );
    out.finish(name, args, Some(a.seed), Some(config), Inputs::default())?;
    if report.passed() {
        println!("gradcheck: pass ({} checks)", report.results.len());
        Ok(())
    } else {
        let failed: Vec<String> = report
            .results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| format!("{}@{}", r.suite, r.seed))
            .collect();
        Err(CliError::Gradcheck(failed.join(" ")))
    }
}

fn ablate(name: &str, args: &[String], a: AblateArgs) -> CliResult<()> {
    let mut inputs = Inputs::default();
    inputs.add(&a.reps)?;
    let cfg = trainer_config(a.config.as_deref(), a.seed, &mut inputs)?;
    let bank = RepBank::load(&a.reps)?;
    let source = match (&a.lm, &a.triplets) {
        (Some(lm_path), Some(tp)) => {
            inputs.add(lm_path)?;
            inputs.add(tp)?;
            let (lm, vocab) = ToyLmParams::load(lm_path)?;
            let triplets = load_triplets(tp, &vocab)?;
            Some((lm, triplets))
        }
        _ => None,
    };
    let mut flag_sets: Vec<Vec<AblationFlag>> = Vec::new();
    for f in AblationFlag::ALL {
        if f == AblationFlag::AllTokens && source.is_none() {
            log::warn!("skipping the all_tokens row: it needs --lm and --triplets");
            continue;
        }
        flag_sets.push(vec![f]);
    }
    let bank_for = |all_tokens: bool| -> truthx::Result<RepBank> {
        match (&source, all_tokens) {
            (Some((lm, t)), true) => extract_reps(lm, t, true),
            _ => Ok(bank.clone()),
        }
    };
    let rows = run_ablation_grid(&bank_for, &cfg, &flag_sets)?;

    let mut out = OutDir::create(&a.out)?;
    let mut table = String::from("run\tfinal_total_loss\tfinal_val_accuracy\theldout_accuracy\n");
    for row in &rows {
        let label = row.label();
        table.push_str(&format!(
            "{label}\t{}\t{}\t{}\n",
            row.final_loss.l_total, row.final_val_accuracy, row.heldout_accuracy
        ));
        println!("{label:<20} held-out accuracy {:.4}", row.heldout_accuracy);
        let mut run_cfg = cfg.clone();
        for &f in &row.flags {
            run_cfg.ablation.set(f, true);
        }
        let dir = out.path(&format!("runs/{label}"));
        let mut sub = OutDir::create(&dir)?;
        write_folds(&mut sub, "", &row.runs)?;
        let mut run_inputs = Inputs::default();
        run_inputs.add(&a.reps)?;
        let m = sub.finish(
            name,
            args,
            Some(run_cfg.seed),
            Some(run_cfg.to_text()),
            run_inputs,
        )?;
        for f in m.outputs.keys() {
            out.record(&format!("runs/{label}/{f}"))?;
        }
        out.record(&format!("runs/{label}/{MANIFEST_NAME}"))?;
    }
    if source.is_none() {
        table.push_str("all_tokens\tskipped\tskipped\tskipped\n");
    }
    out.write("ablation.tsv", table)?;
    out.finish(name, args, Some(cfg.seed), Some(cfg.to_text()), inputs)?;
    Ok(())
}

fn replay(a: ReplayArgs) -> CliResult<()> {
    let m = RunManifest::load(&a.manifest)?;
    if m.command == "replay" {
        return Err(CliError::Usage("cannot replay a replay".into()));
    }
    for (path, hash) in &m.inputs {
        if crate::manifest::sha256_file(Path::new(path))? != *hash {
            return Err(CliError::StaleInput(path.clone()));
        }
    }
    let mut argv = vec!["truthx".to_string(), m.command.clone()];
    argv.extend(m.args.iter().cloned());
    argv.push("--out".into());
    argv.push(a.out.display().to_string());
    crate::run(&argv)?;
    let again = RunManifest::load(&a.out.join(MANIFEST_NAME))?;
    let differ: Vec<&str> = m
        .outputs
        .iter()
        .filter(|(k, v)| again.outputs.get(*k) != Some(*v))
        .map(|(k, _)| k.as_str())
        .chain(
            again
                .outputs
                .keys()
                .filter(|k| !m.outputs.contains_key(*k))
                .map(String::as_str),
        )
        .collect();
    if !differ.is_empty() {
        return Err(CliError::Replay(differ.join(", ")));
    }
    println!("replay: {} outputs identical", m.outputs.len());
    Ok(())
}
