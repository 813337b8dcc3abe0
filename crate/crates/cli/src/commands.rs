use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use veco::bleu::{text_bleu, BLEU_HEADER};
use veco::checkpoint::{average_checkpoints, load_checkpoint, load_checkpoint_for, Checkpoint};
use veco::data::*;
use veco::finetune::*;
use veco::model::{Precision, Veco};
use veco::objective::{export_attention, AttnStream};
use veco::seq2seq::*;
use veco::training::{Pretrainer, METRICS_HEADER};

use crate::config::{ClsTask, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::out::OutDir;

pub const VOCAB: &str = "vocab.txt";
pub const CHECKPOINT: &str = "model.ckpt";
pub const METRICS: &str = "metrics.tsv";
const TRAIN: (&str, &str) = ("train.src", "train.tgt");
const DEV: (&str, &str) = ("dev.src", "dev.tgt");
const MONO: (&str, &str) = ("mono.src", "mono.tgt");
const CLS_TRAIN: &str = "cls_train.tsv";
const CLS_DEV: &str = "cls_dev.tsv";

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::data(format!("{}: no such file", path.display())))
    }
}

fn load_vocab(path: &Path, cfg: &ExperimentConfig) -> Result<Vocabulary> {
    let v = Vocabulary::load(require(path)?)?;
    if v.len() > cfg.model.vocab_size {
        return Err(CliError::data(format!(
            "vocabulary has {} entries but model.vocab_size is {}",
            v.len(),
            cfg.model.vocab_size
        )));
    }
    Ok(v)
}

fn load_parallel(vocab: &Vocabulary, dir: &Path, files: (&str, &str)) -> Result<ParallelCorpus> {
    let (s, t) = (dir.join(files.0), dir.join(files.1));
    Ok(ParallelCorpus::load(vocab, require(&s)?, require(&t)?)?)
}

fn write_cls(vocab: &Vocabulary, examples: &[ClsExample]) -> String {
    let mut s = String::new();
    for e in examples {
        let y =
            e.y.as_deref()
                .map(|y| vocab.detokenize_content(y))
                .unwrap_or_default();
        let ly = e.label_y.map(|l| l.to_string()).unwrap_or_default();
        writeln!(
            s,
            "{}\t{}\t{}\t{}",
            e.label,
            vocab.detokenize_content(&e.x),
            y,
            ly
        )
        .unwrap();
    }
    s
}

/// `label \t x [\t y \t label_y]`, content tokens only.
fn read_cls(
    vocab: &Vocabulary,
    path: &Path,
    max_seq_len: usize,
    num_labels: usize,
) -> Result<Vec<ClsExample>> {
    let text = fs::read_to_string(require(path)?)?;
    let bad = |n: usize, why: &str| CliError::data(format!("{}:{}: {why}", path.display(), n + 1));
    let label = |n: usize, s: &str| -> Result<usize> {
        let l: usize = s
            .trim()
            .parse()
            .map_err(|_| bad(n, "label is not an integer"))?;
        if l >= num_labels {
            return Err(bad(
                n,
                &format!("label {l} out of range for {num_labels} labels"),
            ));
        }
        Ok(l)
    };
    let mut out = vec![];
    for (n, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() < 2 {
            return Err(bad(n, "expected label and sequence columns"));
        }
        let x = vocab.tokenize(cells[1]);
        if x.is_empty() {
            return Err(bad(n, "empty sequence"));
        }
        let y = cells
            .get(2)
            .map(|c| vocab.tokenize(c))
            .filter(|y| !y.is_empty());
        let label_y = match cells.get(3).map(|c| c.trim()).filter(|c| !c.is_empty()) {
            Some(c) => Some(label(n, c)?),
            None => None,
        };
        out.push(ClsExample {
            label: label(n, cells[0])?,
            x: frame(&x, max_seq_len),
            y: y.map(|y| frame(&y, max_seq_len)),
            label_y,
        });
    }
    if out.is_empty() {
        return Err(CliError::data(format!("{}: no examples", path.display())));
    }
    Ok(out)
}

pub fn synth_data(cfg: &mut ExperimentConfig, out: &mut OutDir) -> Result<()> {
    let seed = cfg.seed();
    cfg.data.synthetic.seed = seed;
    cfg.resolve()?;
    let d = &cfg.data;
    let syn = &d.synthetic;
    if syn.vocab_end() > cfg.model.vocab_size {
        return Err(CliError::usage(format!(
            "synthetic vocabulary ends at {} but model.vocab_size is {}",
            syn.vocab_end(),
            cfg.model.vocab_size
        )));
    }
    if d.dev_pairs >= syn.pairs {
        return Err(CliError::usage(
            "data.dev_pairs must be smaller than data.synthetic.pairs",
        ));
    }
    let vocab = Vocabulary::synthetic(syn.vocab_end());
    let (train, dev) = generate_synthetic_pair_corpus(syn)?.split_tail(d.dev_pairs);
    let msl = cfg.model.max_seq_len;
    let docs_src = generate_documents(
        syn,
        d.docs_per_language,
        d.sentences_per_doc,
        false,
        seed.wrapping_add(1),
    )?;
    let docs_tgt = generate_documents(
        syn,
        d.docs_per_language,
        d.sentences_per_doc,
        true,
        seed.wrapping_add(2),
    )?;
    let cls = |n: usize, s: u64| match d.cls_task {
        ClsTask::Parity => parity_task(syn, n, msl, s),
        ClsTask::Xor => xor_task(syn, n, msl, s),
    };
    let (cls_train, cls_dev) = (
        cls(d.cls_train, seed.wrapping_add(3)),
        cls(d.cls_dev, seed.wrapping_add(4)),
    );

    vocab.save(&out.path(VOCAB))?;
    train.save(&vocab, &out.path(TRAIN.0), &out.path(TRAIN.1))?;
    dev.save(&vocab, &out.path(DEV.0), &out.path(DEV.1))?;
    write_documents(&vocab, &docs_src, &out.path(MONO.0))?;
    write_documents(&vocab, &docs_tgt, &out.path(MONO.1))?;
    out.write(CLS_TRAIN, &write_cls(&vocab, &cls_train))?;
    out.write(CLS_DEV, &write_cls(&vocab, &cls_dev))?;
    out.write_config(cfg)?;
    Ok(())
}

pub struct PretrainArgs {
    pub data: PathBuf,
    pub resume: Option<PathBuf>,
    pub steps: Option<u64>,
    pub lr: Option<f64>,
}

pub fn pretrain(args: PretrainArgs, cfg: &mut ExperimentConfig, out: &mut OutDir) -> Result<()> {
    if let Some(n) = args.steps {
        let p = &mut cfg.pretrain;
        p.phase1_steps = p.phase1_steps.min(n);
        p.phase2_steps = n - p.phase1_steps;
    }
    if let Some(lr) = args.lr {
        cfg.pretrain.adam.lr = lr;
    }
    if let Some(p) = &args.resume {
        cfg.model = load_checkpoint(require(p)?)?.header.model;
    }
    cfg.resolve()?;
    let vocab = load_vocab(&args.data.join(VOCAB), cfg)?;
    let msl = cfg.model.max_seq_len;
    let mut corpora = PretrainCorpora::default();
    for (name, file) in [("src", MONO.0), ("tgt", MONO.1)] {
        let p = args.data.join(file);
        if p.exists() {
            corpora.add_monolingual(name, &read_documents(&vocab, &p)?, msl);
        }
    }
    if args.data.join(TRAIN.0).exists() {
        corpora.add_parallel("src-tgt", &load_parallel(&vocab, &args.data, TRAIN)?);
    }
    if corpora
        .mono
        .iter()
        .chain(&corpora.bili)
        .all(|s| s.pairs.is_empty())
    {
        return Err(CliError::data(format!(
            "{}: no pre-training data",
            args.data.display()
        )));
    }
    let mut trainer = match &args.resume {
        Some(p) => {
            Pretrainer::from_checkpoint(load_checkpoint_for(p, &cfg.model)?, cfg.pretrain.clone())?
        }
        None => Pretrainer::new(
            Veco::init(cfg.model.clone(), cfg.seed())?,
            cfg.pretrain.clone(),
            &corpora,
            cfg.seed(),
        )?,
    };
    cfg.seed = Some(trainer.seed);
    out.write_config(cfg)?;
    out.save_checkpoint(CHECKPOINT, &trainer.checkpoint())?;
    let mut metrics = out.metrics(METRICS, METRICS_HEADER)?;
    let every = cfg.pretrain.checkpoint_every;
    while !trainer.is_done() {
        let row = match trainer.step(&corpora) {
            Ok(r) => r,
            Err(e) if e.is_numeric() => {
                // the failed step left the trainer untouched
                out.save_checkpoint(CHECKPOINT, &trainer.checkpoint())?;
                keep_for_diagnosis(out);
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        };
        metrics.row(&row.to_tsv())?;
        if every > 0 && row.step % every == 0 {
            out.save_checkpoint(CHECKPOINT, &trainer.checkpoint())?;
        }
    }
    out.save_checkpoint(CHECKPOINT, &trainer.checkpoint())?;
    Ok(())
}

fn keep_for_diagnosis(out: &mut OutDir) {
    for f in [CHECKPOINT, METRICS, crate::config::RESOLVED_CONFIG] {
        out.keep(f);
    }
}

/// Starting checkpoint: the given file, or a fresh model from the config.
fn start_checkpoint(ckpt: Option<&Path>, cfg: &mut ExperimentConfig) -> Result<Checkpoint> {
    match ckpt {
        Some(p) => {
            let c = load_checkpoint(require(p)?)?;
            cfg.model = c.header.model.clone();
            Ok(c)
        }
        None => {
            cfg.model.validate()?;
            Ok(Checkpoint::from_model(
                &Veco::init(cfg.model.clone(), cfg.seed())?,
                cfg.seed(),
            ))
        }
    }
}

pub struct FinetuneMtArgs {
    pub data: PathBuf,
    pub ckpt: Option<PathBuf>,
    pub steps: Option<u64>,
    pub lr: Option<f64>,
    pub layers: Option<usize>,
    pub selection: Option<Selection>,
}

pub fn finetune_mt_cmd(
    args: FinetuneMtArgs,
    cfg: &mut ExperimentConfig,
    out: &mut OutDir,
) -> Result<()> {
    let ft = &mut cfg.finetune;
    if let Some(n) = args.steps {
        ft.mt.steps = n;
    }
    if let Some(lr) = args.lr {
        ft.mt.adam.lr = lr;
    }
    if args.layers.is_some() {
        ft.decoder_layers = args.layers;
    }
    if let Some(s) = args.selection {
        ft.selection = s;
    }
    let init = start_checkpoint(args.ckpt.as_deref(), cfg)?;
    cfg.resolve()?;
    let vocab = load_vocab(&args.data.join(VOCAB), cfg)?;
    let train = load_parallel(&vocab, &args.data, TRAIN)?;
    let dev = if args.data.join(DEV.0).exists() {
        load_parallel(&vocab, &args.data, DEV)?
    } else {
        ParallelCorpus::new(vec![], vec![], "empty")?
    };
    let ft = &cfg.finetune;
    let n = ft.decoder_layers.unwrap_or(cfg.model.num_layers);
    let (mut s2s, report) = assemble_seq2seq(&init, n, ft.selection, ft.tie)?;
    out.write_config(cfg)?;
    out.write("params.txt", &format!("{report}\n"))?;
    let mut metrics = out.metrics(METRICS, MT_METRICS_HEADER)?;
    let mut io_err = None;
    let seed = cfg.seed();
    let res = finetune_mt(&mut s2s, &train, &dev, &cfg.finetune.mt, seed, |row| {
        if let Err(e) = metrics.row(&row.to_tsv()) {
            io_err.get_or_insert(e);
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    match res {
        Err(e) if e.is_numeric() => {
            out.save_checkpoint(CHECKPOINT, &s2s.checkpoint(seed))?;
            keep_for_diagnosis(out);
            out.keep("params.txt");
            Err(e.into())
        }
        Err(e) => Err(e.into()),
        Ok(_) => {
            out.save_checkpoint(CHECKPOINT, &s2s.checkpoint(seed))?;
            Ok(())
        }
    }
}

pub struct FinetuneClsArgs {
    pub data: PathBuf,
    pub ckpt: Option<PathBuf>,
    pub steps: Option<u64>,
    pub lr: Option<f64>,
    pub mode: Option<ClsMode>,
}

pub fn finetune_cls(
    args: FinetuneClsArgs,
    cfg: &mut ExperimentConfig,
    out: &mut OutDir,
) -> Result<()> {
    let ft = &mut cfg.finetune;
    if let Some(n) = args.steps {
        ft.cls.steps = n;
    }
    if let Some(lr) = args.lr {
        ft.cls.adam.lr = lr;
    }
    if let Some(m) = args.mode {
        ft.cls_mode = m;
    }
    let init = start_checkpoint(args.ckpt.as_deref(), cfg)?;
    cfg.resolve()?;
    let vocab = load_vocab(&args.data.join(VOCAB), cfg)?;
    let (msl, labels) = (cfg.model.max_seq_len, cfg.finetune.num_labels);
    let train = read_cls(&vocab, &args.data.join(CLS_TRAIN), msl, labels)?;
    let dev_path = args.data.join(CLS_DEV);
    let dev = if dev_path.exists() {
        read_cls(&vocab, &dev_path, msl, labels)?
    } else {
        vec![]
    };
    let mode = cfg.finetune.cls_mode;
    if mode == ClsMode::PlugIn && train.iter().chain(&dev).any(|e| e.y.is_none()) {
        return Err(CliError::data(
            "plug-in mode needs a paired sequence on every example",
        ));
    }
    let seed = cfg.seed();
    let mut clf = Classifier::new(init.model()?, mode, labels, seed)?;
    out.write_config(cfg)?;
    let mut metrics = out.metrics(METRICS, CLS_METRICS_HEADER)?;
    let mut io_err = None;
    let res = train_classifier(&mut clf, &train, &cfg.finetune.cls, seed, |r| {
        if let Err(e) = metrics.row(&format!("{}\t{}\t{}", r.step, r.loss, r.lr)) {
            io_err.get_or_insert(e);
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let save = |out: &mut OutDir, clf: &Classifier| {
        let mut c = Checkpoint::from_model(&clf.model, seed);
        c.header.extra =
            serde_json::json!({ "classifier": { "mode": mode, "num_labels": labels } });
        out.save_checkpoint(CHECKPOINT, &c)
    };
    match res {
        Err(e) if e.is_numeric() => {
            save(out, &clf)?;
            keep_for_diagnosis(out);
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
        Ok(_) => {}
    }
    save(out, &clf)?;
    let mut eval = String::from("split\texamples\taccuracy\n");
    for (name, set) in [("train", &train), ("dev", &dev)] {
        if !set.is_empty() {
            writeln!(
                eval,
                "{name}\t{}\t{:.6}",
                set.len(),
                classifier_accuracy(&clf, set)?
            )
            .unwrap();
        }
    }
    out.write("eval.tsv", &eval)?;
    Ok(())
}

pub struct TranslateArgs {
    pub ckpt: PathBuf,
    pub vocab: PathBuf,
    pub input: PathBuf,
    pub beam: Option<usize>,
    pub max_len: Option<usize>,
}

pub fn translate(args: TranslateArgs, cfg: &mut ExperimentConfig, out: &mut OutDir) -> Result<()> {
    if let Some(b) = args.beam {
        cfg.decode.beam_size = b;
    }
    if let Some(m) = args.max_len {
        cfg.decode.max_len = m;
    }
    if cfg.decode.beam_size == 0 {
        return Err(CliError::usage("beam size must be at least 1"));
    }
    let s2s = Seq2Seq::from_checkpoint(&load_checkpoint(require(&args.ckpt)?)?)?;
    cfg.model = s2s.model.config.clone();
    cfg.resolve()?;
    let vocab = load_vocab(&args.vocab, cfg)?;
    let text = fs::read_to_string(require(&args.input)?)?;
    let keep = cfg.model.max_seq_len.saturating_sub(2);
    let mut lines = String::new();
    for line in text.lines() {
        let mut src = vocab.tokenize(line);
        src.truncate(keep);
        let hyp = beam_decode(&s2s, &src, cfg.decode.beam_size, cfg.decode.max_len)?;
        lines.push_str(&vocab.detokenize_content(&hyp));
        lines.push('\n');
    }
    out.write_config(cfg)?;
    out.write("translations.txt", &lines)?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(require(path)?)?
        .lines()
        .map(str::to_string)
        .collect())
}

/// Returns the report as header plus one row.
pub fn eval_bleu(hyp: &Path, reference: &Path, smooth: bool) -> Result<String> {
    let report = text_bleu(&read_lines(hyp)?, &read_lines(reference)?, smooth)?;
    Ok(format!("{BLEU_HEADER}\n{}\n", report.to_tsv()))
}

pub struct ExportArgs {
    pub ckpt: PathBuf,
    pub vocab: PathBuf,
    pub x: String,
    pub y: Option<String>,
    pub layer: usize,
    pub stream: AttnStream,
}

pub fn export_attn(args: ExportArgs, cfg: &mut ExperimentConfig, out: &mut OutDir) -> Result<()> {
    let model = load_checkpoint(require(&args.ckpt)?)?.model()?;
    cfg.model = model.config.clone();
    cfg.resolve()?;
    let vocab = load_vocab(&args.vocab, cfg)?;
    let msl = cfg.model.max_seq_len;
    let x = frame(&vocab.tokenize(&args.x), msl);
    let y = args.y.as_deref().map(|y| frame(&vocab.tokenize(y), msl));
    let map = export_attention(&model, &vocab, &x, y.as_deref(), args.layer, args.stream)?;
    out.write_config(cfg)?;
    out.write("attention.tsv", &map.to_tsv())?;
    Ok(())
}

fn tensor_bytes(data: &[f64], storage: Precision) -> Vec<u8> {
    match storage {
        Precision::F32 => data
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect(),
        Precision::F64 => data.iter().flat_map(|&v| v.to_le_bytes()).collect(),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    })
}

/// Summary comment lines, then `name \t shape \t numel \t sha256` per tensor.
pub fn inspect_ckpt(path: &Path) -> Result<String> {
    let bytes = fs::read(require(path)?)?;
    let ckpt = Checkpoint::from_bytes(&bytes)?;
    let h = &ckpt.header;
    let mut s = String::new();
    writeln!(s, "# file_sha256={}", hex(&Sha256::digest(&bytes))).unwrap();
    writeln!(
        s,
        "# step={} seed={} storage={:?} tensors={} params={} adam={}",
        h.step,
        h.seed,
        h.storage,
        ckpt.params.len(),
        ckpt.num_params(),
        ckpt.adam.is_some()
    )
    .unwrap();
    writeln!(
        s,
        "# model={}",
        serde_json::to_string(&h.model).unwrap_or_default()
    )
    .unwrap();
    writeln!(s, "name\tshape\tnumel\tsha256").unwrap();
    for (_, name, t) in ckpt.params.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let digest = Sha256::digest(tensor_bytes(t.data(), h.storage));
        writeln!(
            s,
            "{name}\t{}\t{}\t{}",
            shape.join("x"),
            t.data().len(),
            hex(&digest)
        )
        .unwrap();
    }
    Ok(s)
}

pub fn avg_ckpt(paths: &[PathBuf], cfg: &mut ExperimentConfig, out: &mut OutDir) -> Result<()> {
    for p in paths {
        require(p)?;
    }
    let avg = average_checkpoints(paths)?;
    cfg.model = avg.header.model.clone();
    cfg.resolve()?;
    out.write_config(cfg)?;
    out.save_checkpoint(CHECKPOINT, &avg)?;
    Ok(())
}
