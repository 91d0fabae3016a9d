//! Small sigmoid multilayer perceptron for binary classification.
//!
//! Hidden layers use sigmoid activations, the single output is a logit
//! trained with binary cross-entropy, and a small weight decay keeps the
//! objective bounded below with a well-defined stationary set.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Accuracy, DistributedProblem, GradientOracle, ProblemError};
use crate::rng::{Purpose, RandomSource, StreamRng};

/// Layer shape of a fully connected network ending in one logit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierNetwork {
    layers: Vec<usize>,
}

impl ClassifierNetwork {
    /// `layers = [inputs, hidden.., 1]`.
    pub fn new(layers: Vec<usize>) -> Result<Self, ProblemError> {
        if layers.len() < 2 || layers.contains(&0) || *layers.last().unwrap() != 1 {
            return Err(ProblemError::InvalidSpec(format!(
                "layer sizes must be positive and end in a single output, got {layers:?}"
            )));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn inputs(&self) -> usize {
        self.layers[0]
    }

    /// Weights (row-major `out x in`) followed by biases, layer by layer.
    pub fn param_count(&self) -> usize {
        self.layers.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    /// Output logit.
    pub fn logit(&self, params: &[f64], x: &[f64]) -> f64 {
        let mut act = x.to_vec();
        let mut offset = 0;
        let last = self.layers.len() - 2;
        for (l, w) in self.layers.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &params[offset..offset + n_out * n_in];
            let biases = &params[offset + n_out * n_in..offset + n_out * (n_in + 1)];
            offset += n_out * (n_in + 1);
            let mut next: Vec<f64> = (0..n_out)
                .map(|o| dot(&weights[o * n_in..(o + 1) * n_in], &act) + biases[o])
                .collect();
            if l != last {
                next.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            act = next;
        }
        act[0]
    }

    /// Binary cross-entropy of one labelled sample; adds its gradient scaled by
    /// `scale` into `grad`.
    fn accumulate(
        &self,
        params: &[f64],
        x: &[f64],
        label: f64,
        scale: f64,
        grad: &mut [f64],
    ) -> f64 {
        let depth = self.layers.len() - 1;
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
        acts.push(x.to_vec());
        let mut offsets = Vec::with_capacity(depth);
        let mut offset = 0;
        for (l, w) in self.layers.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            offsets.push(offset);
            let weights = &params[offset..offset + n_out * n_in];
            let biases = &params[offset + n_out * n_in..offset + n_out * (n_in + 1)];
            offset += n_out * (n_in + 1);
            let prev = &acts[l];
            let mut next: Vec<f64> = (0..n_out)
                .map(|o| dot(&weights[o * n_in..(o + 1) * n_in], prev) + biases[o])
                .collect();
            if l + 1 != depth {
                next.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            acts.push(next);
        }
        let z = acts[depth][0];
        let loss = softplus(z) - label * z;
        let mut delta = vec![scale * (sigmoid(z) - label)];
        for l in (0..depth).rev() {
            let (n_in, n_out) = (self.layers[l], self.layers[l + 1]);
            let off = offsets[l];
            let prev = &acts[l];
            for o in 0..n_out {
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(prev) {
                    *g += delta[o] * a;
                }
                grad[off + n_out * n_in + o] += delta[o];
            }
            if l > 0 {
                let weights = &params[off..off + n_out * n_in];
                delta = (0..n_in)
                    .map(|c| {
                        let back: f64 = (0..n_out).map(|o| weights[o * n_in + c] * delta[o]).sum();
                        back * prev[c] * (1.0 - prev[c])
                    })
                    .collect();
            }
        }
        loss
    }
}

/// Whole-dataset results of [`ClassifierNetwork::pass`].
struct Pass {
    loss_sum: f64,
    /// Sum of per-sample gradients, when requested.
    grad_sum: Option<Vec<f64>>,
    correct: usize,
}

impl ClassifierNetwork {
    /// Forward (and optionally backward) pass over every row of `design` at
    /// once, in matrix form.
    fn pass(&self, params: &[f64], design: &DMatrix<f64>, labels: &[f64], want_grad: bool) -> Pass {
        let depth = self.layers.len() - 1;
        let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(depth + 1);
        let mut weights = Vec::with_capacity(depth);
        let mut offsets = Vec::with_capacity(depth);
        let mut offset = 0;
        for (l, w) in self.layers.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            offsets.push(offset);
            let wm = DMatrix::from_row_slice(n_out, n_in, &params[offset..offset + n_out * n_in]);
            let biases = &params[offset + n_out * n_in..offset + n_out * (n_in + 1)];
            offset += n_out * (n_in + 1);
            let prev = if l == 0 { design } else { &acts[l - 1] };
            let mut z = prev * wm.transpose();
            for (o, b) in biases.iter().enumerate() {
                z.column_mut(o).add_scalar_mut(*b);
            }
            if l + 1 != depth {
                z.apply(|v| *v = sigmoid(*v));
            }
            acts.push(z);
            weights.push(wm);
        }
        let logits = acts.pop().expect("at least one layer");
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (z, y) in logits.iter().zip(labels) {
            loss_sum += softplus(*z) - y * z;
            if (*z > 0.0) == (*y > 0.5) {
                correct += 1;
            }
        }
        let grad_sum = want_grad.then(|| {
            let mut grad = vec![0.0; self.param_count()];
            let mut delta = DMatrix::from_iterator(
                labels.len(),
                1,
                logits.iter().zip(labels).map(|(z, y)| sigmoid(*z) - y),
            );
            for l in (0..depth).rev() {
                let (n_in, n_out) = (self.layers[l], self.layers[l + 1]);
                let off = offsets[l];
                let prev = if l == 0 { design } else { &acts[l - 1] };
                let gw = delta.transpose() * prev;
                for o in 0..n_out {
                    for c in 0..n_in {
                        grad[off + o * n_in + c] = gw[(o, c)];
                    }
                    grad[off + n_out * n_in + o] = delta.column(o).sum();
                }
                if l > 0 {
                    let mut back = &delta * &weights[l];
                    back.zip_apply(prev, |b, a| *b *= a * (1.0 - a));
                    delta = back;
                }
            }
            grad
        });
        Pass {
            loss_sum,
            grad_sum,
            correct,
        }
    }
}

fn design_matrix(data: &Dataset) -> DMatrix<f64> {
    DMatrix::from_row_slice(data.len(), data.inputs, &data.features)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    // exp overflows to infinity for very negative z, giving exactly 0.
    1.0 / (1.0 + (-z).exp())
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Labelled feature vectors, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    /// 0 or 1.
    pub labels: Vec<f64>,
    pub inputs: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.features[j * self.inputs..(j + 1) * self.inputs]
    }
}

/// One agent's classification objective:
/// mean cross-entropy plus `(decay/2) ||theta||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpProblem {
    network: ClassifierNetwork,
    data: Dataset,
    weight_decay: f64,
    design: DMatrix<f64>,
}

impl MlpProblem {
    pub fn new(
        network: ClassifierNetwork,
        data: Dataset,
        weight_decay: f64,
    ) -> Result<Self, ProblemError> {
        if data.inputs != network.inputs() {
            return Err(ProblemError::DimensionMismatch {
                expected: network.inputs(),
                got: data.inputs,
            });
        }
        if data.is_empty() || data.features.len() != data.len() * data.inputs {
            return Err(ProblemError::InvalidSpec("empty or ragged dataset".into()));
        }
        if !(weight_decay >= 0.0) {
            return Err(ProblemError::InvalidSpec(format!(
                "weight decay {weight_decay} is negative"
            )));
        }
        let design = design_matrix(&data);
        Ok(Self {
            network,
            data,
            weight_decay,
            design,
        })
    }

    pub fn network(&self) -> &ClassifierNetwork {
        &self.network
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    fn batch_gradient(
        &self,
        x: &[f64],
        indices: impl Iterator<Item = usize>,
        count: usize,
    ) -> Vec<f64> {
        let mut grad: Vec<f64> = x.iter().map(|v| self.weight_decay * v).collect();
        let scale = 1.0 / count as f64;
        for j in indices {
            self.network
                .accumulate(x, self.data.row(j), self.data.labels[j], scale, &mut grad);
        }
        grad
    }
}

impl GradientOracle for MlpProblem {
    fn dim(&self) -> usize {
        self.network.param_count()
    }

    fn sample_count(&self) -> usize {
        self.data.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let pass = self.network.pass(x, &self.design, &self.data.labels, false);
        pass.loss_sum / self.data.len() as f64
            + 0.5 * self.weight_decay * x.iter().map(|v| v * v).sum::<f64>()
    }

    fn full_gradient(&self, x: &[f64]) -> Vec<f64> {
        let n = self.data.len() as f64;
        let pass = self.network.pass(x, &self.design, &self.data.labels, true);
        let sum = pass.grad_sum.expect("requested");
        sum.iter()
            .zip(x)
            .map(|(g, v)| g / n + self.weight_decay * v)
            .collect()
    }

    fn stochastic_gradient(&self, x: &[f64], batch: usize, rng: &mut StreamRng) -> Vec<f64> {
        let n = self.data.len();
        if batch >= n {
            return self.full_gradient(x);
        }
        let b = batch.max(1);
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        self.batch_gradient(x, idx.into_iter(), b)
    }
}

/// Two Gaussian blobs with identity covariance whose centres are
/// `separation` apart along the all-ones direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobSpec {
    pub agents: usize,
    pub train_per_agent: usize,
    pub validation_per_agent: usize,
    pub inputs: usize,
    pub hidden: Vec<usize>,
    pub separation: f64,
    pub weight_decay: f64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            agents: 5,
            train_per_agent: 200,
            validation_per_agent: 50,
            inputs: 24,
            hidden: vec![8],
            separation: 3.0,
            weight_decay: 1e-3,
        }
    }
}

impl BlobSpec {
    pub fn network(&self) -> Result<ClassifierNetwork, ProblemError> {
        let mut layers = vec![self.inputs];
        layers.extend(&self.hidden);
        layers.push(1);
        ClassifierNetwork::new(layers)
    }
}

/// Per-agent classifiers plus a pooled validation set.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    locals: Vec<MlpProblem>,
    validation: Dataset,
    validation_design: DMatrix<f64>,
}

impl MlpNetwork {
    pub fn new(locals: Vec<MlpProblem>, validation: Dataset) -> Result<Self, ProblemError> {
        let first = locals
            .first()
            .ok_or_else(|| ProblemError::InvalidSpec("no agents".into()))?;
        if locals.iter().any(|p| p.network != first.network) {
            return Err(ProblemError::InvalidSpec(
                "agents disagree on network shape".into(),
            ));
        }
        if validation.inputs != first.network.inputs() {
            return Err(ProblemError::DimensionMismatch {
                expected: first.network.inputs(),
                got: validation.inputs,
            });
        }
        let validation_design = design_matrix(&validation);
        Ok(Self {
            locals,
            validation,
            validation_design,
        })
    }

    pub fn validation(&self) -> &Dataset {
        &self.validation
    }

    /// Rows `agent, split, label, x0..` where split is `train` or `validation`
    /// (validation rows carry agent `-1`), preceded by a `#layers` and
    /// `#weight_decay` header line.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        let net = &self.locals[0].network;
        let mut rec = vec!["#layers".to_string()];
        rec.extend(net.layers.iter().map(|l| l.to_string()));
        w.write_record(&rec)?;
        w.write_record([
            "#weight_decay".to_string(),
            format!("{:?}", self.locals[0].weight_decay),
        ])?;
        let write_set =
            |w: &mut csv::Writer<W>, agent: &str, split: &str, d: &Dataset| -> csv::Result<()> {
                for j in 0..d.len() {
                    let mut rec = vec![
                        agent.to_string(),
                        split.to_string(),
                        format!("{:?}", d.labels[j]),
                    ];
                    rec.extend(d.row(j).iter().map(|v| format!("{v:?}")));
                    w.write_record(&rec)?;
                }
                Ok(())
            };
        for (i, p) in self.locals.iter().enumerate() {
            write_set(&mut w, &i.to_string(), "train", &p.data)?;
        }
        write_set(&mut w, "-1", "validation", &self.validation)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, ProblemError> {
        let bad = |e: String| ProblemError::InvalidSpec(e);
        let mut r = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(input);
        let mut layers = None;
        let mut decay = None;
        let mut train: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        let mut val = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let parse = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s}: {e}")));
            match &rec[0] {
                "#layers" => {
                    layers = Some(
                        rec.iter()
                            .skip(1)
                            .map(|s| s.parse::<usize>().map_err(|e| bad(e.to_string())))
                            .collect::<Result<Vec<_>, _>>()?,
                    )
                }
                "#weight_decay" => decay = Some(parse(&rec[1])?),
                _ => {
                    let label = parse(&rec[2])?;
                    let x = rec
                        .iter()
                        .skip(3)
                        .map(parse)
                        .collect::<Result<Vec<_>, _>>()?;
                    let target = if &rec[1] == "validation" {
                        &mut val
                    } else {
                        let agent: usize = rec[0]
                            .parse()
                            .map_err(|_| bad(format!("bad agent {}", &rec[0])))?;
                        if agent == train.len() {
                            train.push((Vec::new(), Vec::new()));
                        } else if agent + 1 != train.len() {
                            return Err(bad(format!("rows for agent {agent} are not contiguous")));
                        }
                        &mut train[agent]
                    };
                    target.0.extend(x);
                    target.1.push(label);
                }
            }
        }
        let network = ClassifierNetwork::new(layers.ok_or_else(|| bad("missing #layers".into()))?)?;
        let decay = decay.ok_or_else(|| bad("missing #weight_decay".into()))?;
        let inputs = network.inputs();
        let locals = train
            .into_iter()
            .map(|(features, labels)| {
                MlpProblem::new(
                    network.clone(),
                    Dataset {
                        features,
                        labels,
                        inputs,
                    },
                    decay,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let validation = Dataset {
            features: val.0,
            labels: val.1,
            inputs,
        };
        Self::new(locals, validation)
    }
}

impl DistributedProblem for MlpNetwork {
    type Local = MlpProblem;

    fn locals(&self) -> &[MlpProblem] {
        &self.locals
    }

    fn reports_accuracy(&self) -> bool {
        true
    }

    fn accuracy(&self, x: &[f64]) -> Option<Accuracy> {
        Some(self.evaluate(x, false).1)
    }

    fn gradient_and_accuracy(&self, x: &[f64]) -> (Vec<f64>, Option<Accuracy>) {
        let (g, acc) = self.evaluate(x, true);
        (g.expect("requested"), Some(acc))
    }
}

impl MlpNetwork {
    /// One pass per local dataset plus one over validation data.
    fn evaluate(&self, x: &[f64], want_grad: bool) -> (Option<Vec<f64>>, Accuracy) {
        let net = &self.locals[0].network;
        let m = self.locals.len() as f64;
        let sq = x.iter().map(|v| v * v).sum::<f64>();
        let (mut loss, mut hits, mut total) = (0.0, 0, 0);
        let mut grad = want_grad.then(|| vec![0.0; x.len()]);
        for p in &self.locals {
            let n = p.data.len() as f64;
            let pass = net.pass(x, &p.design, &p.data.labels, want_grad);
            loss += (pass.loss_sum / n + 0.5 * p.weight_decay * sq) / m;
            hits += pass.correct;
            total += p.data.len();
            if let (Some(g), Some(sum)) = (grad.as_mut(), pass.grad_sum) {
                for ((a, s), v) in g.iter_mut().zip(sum).zip(x) {
                    *a += (s / n + p.weight_decay * v) / m;
                }
            }
        }
        let validation = net.pass(x, &self.validation_design, &self.validation.labels, false);
        let acc = Accuracy {
            train_loss: loss,
            train: hits as f64 / total as f64,
            validation: validation.correct as f64 / self.validation.len().max(1) as f64,
        };
        (grad, acc)
    }
}

fn draw_blobs(spec: &BlobSpec, count: usize, rng: &mut StreamRng) -> Dataset {
    let p = spec.inputs;
    let shift = 0.5 * spec.separation / (p as f64).sqrt();
    let mut features = Vec::with_capacity(count * p);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let positive = rng.random::<bool>();
        let sign = if positive { 1.0 } else { -1.0 };
        for _ in 0..p {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(sign * shift + noise);
        }
        labels.push(if positive { 1.0 } else { 0.0 });
    }
    Dataset {
        features,
        labels,
        inputs: p,
    }
}

/// Independent blob samples per agent, plus a pooled validation set.
pub fn generate_blob_data(
    spec: &BlobSpec,
    source: &RandomSource,
) -> Result<MlpNetwork, ProblemError> {
    if spec.agents == 0 || spec.train_per_agent == 0 || spec.inputs == 0 {
        return Err(ProblemError::InvalidSpec(format!(
            "all sizes must be positive: {spec:?}"
        )));
    }
    let network = spec.network()?;
    let locals = (0..spec.agents)
        .map(|i| {
            let mut rng = source.rng(i, 0, Purpose::Data);
            MlpProblem::new(
                network.clone(),
                draw_blobs(spec, spec.train_per_agent, &mut rng),
                spec.weight_decay,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = source.rng(spec.agents, 1, Purpose::Data);
    let validation = draw_blobs(spec, spec.validation_per_agent * spec.agents, &mut rng);
    MlpNetwork::new(locals, validation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{norm_sq, norm_sq_diff, sampled_constants};

    fn small() -> MlpNetwork {
        let spec = BlobSpec {
            inputs: 4,
            hidden: vec![3],
            train_per_agent: 20,
            validation_per_agent: 5,
            ..BlobSpec::default()
        };
        generate_blob_data(&spec, &RandomSource::new(3)).unwrap()
    }

    fn point(d: usize, seed: u64) -> Vec<f64> {
        let mut rng = RandomSource::new(seed).rng(0, 0, Purpose::Probe);
        (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect()
    }

    #[test]
    fn default_shape_has_a_few_hundred_parameters() {
        let net = BlobSpec::default().network().unwrap();
        assert_eq!(net.layers(), &[24, 8, 1]);
        assert_eq!(net.param_count(), 8 * 25 + 9);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ClassifierNetwork::new(vec![3]).is_err());
        assert!(ClassifierNetwork::new(vec![3, 0, 1]).is_err());
        assert!(ClassifierNetwork::new(vec![3, 4, 2]).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let net = small();
        for (k, p) in net.locals().iter().enumerate() {
            let x = point(p.dim(), k as u64);
            let g = p.full_gradient(&x);
            let h = 1e-6;
            for c in 0..p.dim() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += h;
                xm[c] -= h;
                let fd = (p.value(&xp) - p.value(&xm)) / (2.0 * h);
                assert!((fd - g[c]).abs() <= 1e-7, "coord {c}: {fd} vs {}", g[c]);
            }
        }
    }

    #[test]
    fn deeper_network_gradient_matches_central_differences() {
        let spec = BlobSpec {
            inputs: 3,
            hidden: vec![4, 3],
            train_per_agent: 10,
            agents: 1,
            ..BlobSpec::default()
        };
        let net = generate_blob_data(&spec, &RandomSource::new(1)).unwrap();
        let p = &net.locals()[0];
        let x = point(p.dim(), 9);
        let g = p.full_gradient(&x);
        for c in 0..p.dim() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[c] += 1e-6;
            xm[c] -= 1e-6;
            let fd = (p.value(&xp) - p.value(&xm)) / 2e-6;
            assert!((fd - g[c]).abs() <= 1e-7);
        }
    }

    #[test]
    fn full_batch_is_exact() {
        let net = small();
        let p = &net.locals()[0];
        let x = point(p.dim(), 1);
        let mut rng = RandomSource::new(0).rng(0, 0, Purpose::Gradient);
        assert_eq!(
            p.stochastic_gradient(&x, p.sample_count(), &mut rng),
            p.full_gradient(&x)
        );
    }

    #[test]
    fn batch_gradients_are_unbiased() {
        let net = small();
        let p = &net.locals()[1];
        let x = point(p.dim(), 2);
        let full = p.full_gradient(&x);
        let mut rng = RandomSource::new(0).rng(0, 0, Purpose::Gradient);
        let n = 100_000;
        let mut mean = vec![0.0; p.dim()];
        let mut spread = 0.0;
        for _ in 0..n {
            let g = p.stochastic_gradient(&x, 1, &mut rng);
            spread += norm_sq_diff(&g, &full);
            mean.iter_mut()
                .zip(&g)
                .for_each(|(m, v)| *m += v / n as f64);
        }
        let se = (spread / n as f64 / n as f64).sqrt();
        assert!(norm_sq_diff(&mean, &full).sqrt() <= 5.0 * se);
    }

    #[test]
    fn sampled_lipschitz_is_max_over_probes() {
        let net = small();
        let p = &net.locals()[0];
        let mut rng = RandomSource::new(0).rng(0, 0, Purpose::Probe);
        let (l, var) = p.estimate_constants(50, &mut rng);
        assert!(l > 0.0 && var > 0.0);
        let mut rng = RandomSource::new(0).rng(0, 0, Purpose::Probe);
        assert_eq!(sampled_constants(p, 50, &mut rng), (l, var));
    }

    #[test]
    fn blobs_are_balanced_and_separated() {
        let spec = BlobSpec::default();
        let net = generate_blob_data(&spec, &RandomSource::new(5)).unwrap();
        let data = &net.locals()[0].data;
        let positives = data.labels.iter().sum::<f64>();
        assert!((positives - 100.0).abs() < 40.0);
        // Projection on the separating direction differs by about `separation`.
        let u = 1.0 / (spec.inputs as f64).sqrt();
        let (mut pos, mut neg) = (0.0, 0.0);
        for j in 0..data.len() {
            let proj: f64 = data.row(j).iter().map(|v| v * u).sum();
            if data.labels[j] > 0.5 {
                pos += proj / positives;
            } else {
                neg += proj / (data.len() as f64 - positives);
            }
        }
        assert!((pos - neg - spec.separation).abs() < 0.5);
    }

    #[test]
    fn accuracy_of_zero_model_is_chance_level() {
        let net = small();
        let d = net.dim();
        let acc = net.accuracy(&vec![0.0; d]).unwrap();
        // Zero logit predicts the negative class everywhere.
        assert!((acc.train_loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(acc.train < 0.8 && acc.train > 0.2);
    }

    #[test]
    fn csv_round_trip_preserves_data() {
        let net = small();
        let mut buf = Vec::new();
        net.write_csv(&mut buf).unwrap();
        let back = MlpNetwork::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn weight_decay_adds_linear_term() {
        let net = small();
        let p = &net.locals()[0];
        let bare = MlpProblem::new(p.network.clone(), p.data.clone(), 0.0).unwrap();
        let x = point(p.dim(), 4);
        let diff: Vec<f64> = p
            .full_gradient(&x)
            .iter()
            .zip(bare.full_gradient(&x))
            .map(|(a, b)| a - b)
            .collect();
        let expected: Vec<f64> = x.iter().map(|v| v * p.weight_decay).collect();
        assert!(norm_sq_diff(&diff, &expected) < 1e-24);
        assert!(norm_sq(&diff) > 0.0);
    }

    #[test]
    fn matrix_pass_matches_per_sample_backprop() {
        let deep = BlobSpec {
            hidden: vec![6, 4],
            train_per_agent: 30,
            ..BlobSpec::default()
        };
        for net in [
            small(),
            generate_blob_data(&deep, &RandomSource::new(2)).unwrap(),
        ] {
            for p in net.locals() {
                let x = point(p.dim(), 9);
                let n = p.data.len();
                let per_sample = p.batch_gradient(&x, 0..n, n);
                assert!(norm_sq_diff(&p.full_gradient(&x), &per_sample) < 1e-24);
                let loss: f64 = (0..n)
                    .map(|j| {
                        let z = p.network.logit(&x, p.data.row(j));
                        softplus(z) - p.data.labels[j] * z
                    })
                    .sum::<f64>()
                    / n as f64
                    + 0.5 * p.weight_decay * norm_sq(&x);
                assert!((p.value(&x) - loss).abs() < 1e-12);
            }
            let x = point(net.dim(), 1);
            let hits = net
                .validation()
                .labels
                .iter()
                .enumerate()
                .filter(|(j, y)| {
                    (net.locals()[0].network.logit(&x, net.validation().row(*j)) > 0.0)
                        == (**y > 0.5)
                })
                .count();
            let expected = hits as f64 / net.validation().len() as f64;
            assert_eq!(net.accuracy(&x).unwrap().validation, expected);
        }
    }

    #[test]
    fn fused_metrics_match_separate_evaluations() {
        let net = small();
        let x = point(net.dim(), 3);
        let (g, acc) = net.gradient_and_accuracy(&x);
        assert!(norm_sq_diff(&g, &net.aggregate_gradient(&x)) < 1e-24);
        let acc = acc.unwrap();
        assert!((acc.train_loss - net.aggregate_value(&x)).abs() < 1e-12);
        assert_eq!(acc, net.accuracy(&x).unwrap());
    }
}
