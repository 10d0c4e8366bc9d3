use std::collections::BTreeMap;

use tensor_core::{AdamW, AdamWConfig, ExpDecay, Graph};

use crate::layout::LmExample;
use crate::model::LmModel;
use crate::{LmError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub adamw: AdamWConfig,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr_start: 3e-4,
            lr_end: 1e-4,
            adamw: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    /// Cross-entropy averaged over every target token of the batch.
    pub loss: f64,
    pub tokens: usize,
}

pub struct LmTrainer {
    cfg: LmTrainConfig,
    opt: AdamW,
    step: usize,
}

fn no_decay(name: &str) -> bool {
    name.ends_with(".b") || name.ends_with(".g") || name == "pos"
}

fn target_count(ex: &LmExample) -> usize {
    ex.targets.iter().flatten().filter(|t| t.is_some()).count()
}

impl LmTrainer {
    pub fn new(cfg: LmTrainConfig) -> Self {
        let opt = AdamW::new(cfg.adamw.clone());
        Self { cfg, opt, step: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One AdamW update on the token-averaged loss of `batch`.
    pub fn step(&mut self, model: &mut LmModel, batch: &[LmExample]) -> Result<StepStats> {
        let total: usize = batch.iter().map(target_count).sum();
        if total == 0 {
            return Err(LmError::Input("batch has no target tokens".into()));
        }
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut loss = 0.0;
        for ex in batch {
            let (item_loss, g) = example_loss(model, ex, total, true)?;
            loss += item_loss;
            for (name, gv) in g.expect("gradients requested") {
                match grads.get_mut(&name) {
                    Some(acc) => acc.iter_mut().zip(&gv).for_each(|(a, v)| *a += v),
                    None => {
                        grads.insert(name, gv);
                    }
                }
            }
        }
        let lr = ExpDecay {
            start: self.cfg.lr_start,
            end: self.cfg.lr_end,
            total_steps: self.cfg.steps,
        }
        .lr(self.step);
        self.opt.step(model.params_mut(), &grads, lr, &no_decay);
        self.step += 1;
        Ok(StepStats {
            step: self.step - 1,
            lr,
            loss,
            tokens: total,
        })
    }
}

/// Loss of one example as its share of a `total`-token batch average.
fn example_loss(
    model: &LmModel,
    ex: &LmExample,
    total: usize,
    with_grads: bool,
) -> Result<(f64, Option<BTreeMap<String, Vec<f64>>>)> {
    let v = model.config().vocab_size;
    let streams = model.config().streams;
    let mut g = Graph::new();
    let b = model.params().bind(&mut g, with_grads);
    let out = model.forward_graph(&mut g, &b, &ex.input)?;
    if ex.targets.len() != ex.input.tokens.len() {
        return Err(LmError::Input(format!(
            "{} target rows for {} positions",
            ex.targets.len(),
            ex.input.tokens.len()
        )));
    }
    let mut terms = Vec::new();
    for (j, &logits) in out.logits.iter().enumerate().take(streams) {
        let targets: Vec<usize> = ex
            .targets
            .iter()
            .map(|row| row.get(j).copied().flatten().map_or(v, |t| t as usize))
            .collect();
        let n = targets.iter().filter(|&&t| t != v).count();
        if n == 0 {
            continue;
        }
        let ce = g.cross_entropy(logits, &targets, v)?;
        terms.push(g.scale(ce, n as f64 / total as f64)?);
    }
    let Some(mut loss) = terms.first().copied() else {
        return Ok((0.0, with_grads.then(BTreeMap::new)));
    };
    for &t in &terms[1..] {
        loss = g.add(loss, t)?;
    }
    let value = g.value(loss).item();
    if !with_grads {
        return Ok((value, None));
    }
    let grads = g.backward(loss)?;
    Ok((value, Some(model.params().collect_grads(&b, &grads))))
}

/// Token-averaged loss without updating anything.
pub fn evaluate_loss(model: &LmModel, examples: &[LmExample]) -> Result<f64> {
    let total: usize = examples.iter().map(target_count).sum();
    let mut loss = 0.0;
    for ex in examples {
        loss += example_loss(model, ex, total.max(1), false)?.0;
    }
    Ok(loss)
}

/// Fraction of target tokens (all heads) whose argmax prediction is right.
pub fn teacher_forced_accuracy(model: &LmModel, examples: &[LmExample]) -> Result<f64> {
    let mut right = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let out = model.forward(&ex.input)?;
        for (p, row) in ex.targets.iter().enumerate() {
            for (j, t) in row.iter().enumerate() {
                let Some(t) = t else { continue };
                let l = out.logits[j].row(p);
                let arg = l
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (i, &x)| if x > best.1 { (i, x) } else { best },
                    )
                    .0;
                total += 1;
                right += usize::from(arg == *t as usize);
            }
        }
    }
    if total == 0 {
        return Err(LmError::Input("no target tokens".into()));
    }
    Ok(right as f64 / total as f64)
}
