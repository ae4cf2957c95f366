use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use super::config::{Algorithm, Coordinator, TrainConfig};
use super::data::{setup, Dataset, Setup};
use super::metrics::{evaluate, EpochMetrics};
use crate::error::{Error, Result};
use crate::loj::{
    aux_upstream, sgd_partial_gradient, touched_rows, AdmmServerState, AggregatedVars,
    Predictions, SgdServerState, SparsePredictions, ThetaProblem,
};
use crate::lou::{sgd_aggregate, ConsensusProblem, ConsensusState};
use crate::model::{loss_and_grad, shuffled_batches, BlockModel, CentralizedTrainer, LocalModel};
use crate::netsim::{NetLedger, NetProfile, Node, PayloadKind, RunMeta, Transfer};
use crate::privacy::{calibrate_sigma, noisy_clipped_sum, FeatureAccountant};
use crate::rng::{self, Purpose};

/// Everything a finished run produced.
#[derive(Debug)]
pub struct RunOutput {
    pub metrics: Vec<EpochMetrics>,
    /// Final model of each organization (the consensus `w` for unions).
    pub models: Vec<LocalModel>,
    pub ledger: NetLedger,
    pub meta: RunMeta,
    /// Organization parameters before training.
    pub init_params: Vec<Array1<f64>>,
    /// Organization parameters after each epoch.
    pub epoch_params: Vec<Vec<Array1<f64>>>,
    /// Organization parameters after each SGD step, when traced.
    pub step_params: Vec<Vec<Array1<f64>>>,
    /// Mean `‖Σ_i h_j − z_j‖` per epoch (ADMM only).
    pub primal_residuals: Vec<f64>,
    /// Noise multiplier used for feature DP.
    pub sigma: Option<f64>,
    pub setup: Setup,
}

struct FeatureDp {
    sigma: f64,
    clip: f64,
    q: f64,
    acc: FeatureAccountant,
}

fn client_map<T, F>(parallel: bool, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if parallel {
        (0..n).into_par_iter().map(f).collect()
    } else {
        (0..n).map(f).collect()
    }
}

fn param_bytes(m: &LocalModel) -> u64 {
    (m.num_params() * 8) as u64
}

struct Ctx<'a> {
    cfg: &'a TrainConfig,
    setup: Setup,
    xs: Vec<Array2<f64>>,
    train_x: Vec<Array2<f64>>,
    test_x: Vec<Array2<f64>>,
    table_rows: Vec<usize>,
    profile: NetProfile,
    n: usize,
    batch: usize,
    parts: Vec<Vec<Range<usize>>>,
    dp: Option<FeatureDp>,
    ledger: NetLedger,
    models: Vec<LocalModel>,
    metrics: Vec<EpochMetrics>,
    epoch_params: Vec<Vec<Array1<f64>>>,
    step_params: Vec<Vec<Array1<f64>>>,
    residuals: Vec<f64>,
}

impl Ctx<'_> {
    fn y(&self) -> &[f64] {
        self.setup.train_labels()
    }

    fn coordinator(&self, org: usize) -> Node {
        match self.cfg.coordinator {
            Coordinator::Server => Node::Server,
            Coordinator::PerOrg => Node::Coordinator { org },
        }
    }

    fn multi_partition(&self) -> bool {
        self.parts.iter().any(|p| p.len() > 1)
    }

    fn trace(&mut self) {
        if self.cfg.trace_steps {
            self.step_params
                .push(self.models.iter().map(|m| m.params().clone()).collect());
        }
    }

    fn end_epoch(&mut self, epoch: usize) -> Result<()> {
        self.ledger.snapshot(epoch);
        let views: Vec<ArrayView2<f64>> = self.train_x.iter().map(|x| x.view()).collect();
        let train_loss =
            BlockModel::new(self.models.clone()).objective(&views, self.y(), &self.cfg.loss)?;
        let test_metric = evaluate(&self.models, &self.test_x, self.setup.test_labels(), &self.cfg.loss)?;
        let eps_feature = self.dp.as_ref().map(|d| d.acc.epsilon()).transpose()?;
        self.metrics.push(EpochMetrics {
            epoch,
            train_loss,
            test_metric,
            comm_rounds: self.ledger.rounds(),
            comm_bytes: self.ledger.total_bytes(),
            sim_time_s: self.ledger.sim_time_s(),
            eps_label: self.setup.eps_label,
            eps_feature,
        });
        self.epoch_params
            .push(self.models.iter().map(|m| m.params().clone()).collect());
        if let Some(bad) = self.models.iter().position(|m| m.params().iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!(
                "organization {bad} has non-finite parameters; lower the step size"
            )));
        }
        Ok(())
    }

    /// Clipped, noised sum of per-row gradients for one client.
    fn private_sum(
        &self,
        model: &LocalModel,
        x: ArrayView2<f64>,
        upstream: ArrayView2<f64>,
        coords: &[u64],
    ) -> Result<Array1<f64>> {
        let dp = self.dp.as_ref().expect("feature DP configured");
        let per_sample = model.per_sample_gradients(x, upstream)?;
        let mut rng = rng::stream(self.cfg.seed, Purpose::GradientNoise, coords);
        noisy_clipped_sum(per_sample.view(), dp.clip, dp.sigma, &mut rng)
    }

    // ---- SGD family -------------------------------------------------------

    fn vfl_sgd_step(&mut self, epoch: usize, step: usize, batch: &[usize]) -> Result<()> {
        let m = self.models.len();
        let b = batch.len();
        let xb: Vec<Array2<f64>> = self.train_x.iter().map(|x| x.select(Axis(0), batch)).collect();
        let views: Vec<ArrayView2<f64>> = xb.iter().map(|x| x.view()).collect();
        let z = BlockModel::new(self.models.clone()).predict(&views)?;
        let yb: Vec<f64> = batch.iter().map(|&j| self.y()[j]).collect();
        let (_, v) = loss_and_grad(&self.cfg.loss, z.view(), &yb)?;
        let d_c = v.ncols();
        let mut round = Vec::new();
        for i in 0..m {
            let c = Node::client(i, 0);
            round.push(Transfer::new(c, Node::Server, (b * d_c * 8) as u64, PayloadKind::Predictions));
            round.push(
                Transfer::new(Node::Server, c, (b * d_c * 8) as u64, PayloadKind::PartialDerivatives)
                    .with_rows(b as u64),
            );
        }
        self.ledger.record_round(&round, &self.profile);
        let beta = self.cfg.loss.effective_beta();
        let ones = vec![1usize; b];
        let grads = client_map(self.cfg.parallel, m, |i| {
            let model = &self.models[i];
            let partial = if self.dp.is_some() {
                let mut g = self.private_sum(model, xb[i].view(), v.view(), &[i as u64, 0, epoch as u64, step as u64])?;
                if beta != 0.0 {
                    g.scaled_add(beta * b as f64, &model.l2_penalty_grad());
                }
                g
            } else {
                sgd_partial_gradient(model, xb[i].view(), v.view(), &ones, beta)?
            };
            sgd_aggregate(&[(0, partial)], 1, b)
        })?;
        for (model, g) in self.models.iter_mut().zip(&grads) {
            model.descend(self.cfg.lr, g);
        }
        if let Some(dp) = self.dp.as_mut() {
            dp.acc.record(1);
        }
        self.trace();
        Ok(())
    }

    fn rfl_sgd_step(
        &mut self,
        server: &mut SgdServerState,
        epoch: usize,
        step: usize,
        batch: &[usize],
    ) -> Result<()> {
        let m = self.models.len();
        let mapping = &self.setup.train;
        let touched: Vec<Vec<usize>> = (0..m).map(|i| touched_rows(mapping, i, batch)).collect();
        let preds = client_map(self.cfg.parallel, m, |i| {
            let x = self.xs[i].select(Axis(0), &touched[i]);
            Ok(SparsePredictions {
                org: i,
                rows: touched[i].clone(),
                values: self.models[i].forward(x.view())?,
            })
        })?;
        server.gather_batch(&preds, mapping, batch)?;
        let (_, aggs) = server.step(&self.cfg.loss, self.y(), mapping)?;

        let mut round = Vec::new();
        let mut jobs = Vec::new();
        for i in 0..m {
            let d_c = aggs[i].y.ncols();
            for (q, range) in self.parts[i].iter().enumerate() {
                let c = Node::client(i, q);
                let lo = touched[i].partition_point(|&r| r < range.start);
                let hi = touched[i].partition_point(|&r| r < range.end);
                let k = (hi - lo) as u64;
                let slice = aggs[i].slice(range.clone());
                round.push(Transfer::new(Node::Server, c, 8 * k, PayloadKind::BatchRequest));
                round.push(Transfer::new(c, Node::Server, k * d_c as u64 * 8, PayloadKind::Predictions));
                round.push(
                    Transfer::new(Node::Server, c, slice.wire_bytes(), PayloadKind::PartialDerivatives)
                        .with_rows(slice.rows.len() as u64),
                );
                jobs.push((i, q, slice));
            }
        }
        self.ledger.record_round(&round, &self.profile);

        let beta = self.cfg.loss.effective_beta();
        let partials = client_map(self.cfg.parallel, jobs.len(), |k| {
            let (i, q, ref slice) = jobs[k];
            let model = &self.models[i];
            let start = self.parts[i][q].start;
            let rows: Vec<usize> = slice.rows.iter().map(|r| r + start).collect();
            let x = self.xs[i].select(Axis(0), &rows);
            if self.dp.is_some() {
                let coords = [i as u64, q as u64, epoch as u64, step as u64];
                let mut g = self.private_sum(model, x.view(), slice.y.view(), &coords)?;
                if beta != 0.0 {
                    let total: usize = slice.counts.iter().sum();
                    g.scaled_add(beta * total as f64, &model.l2_penalty_grad());
                }
                Ok(g)
            } else {
                sgd_partial_gradient(model, x.view(), slice.y.view(), &slice.counts, beta)
            }
        })?;
        let mut by_org: Vec<Vec<(usize, Array1<f64>)>> = vec![Vec::new(); m];
        for ((i, q, _), g) in jobs.iter().zip(partials) {
            by_org[*i].push((*q, g));
        }
        for (i, partials) in by_org.iter().enumerate() {
            let g = sgd_aggregate(partials, self.parts[i].len(), batch.len())?;
            self.models[i].descend(self.cfg.lr, &g);
        }
        if self.multi_partition() {
            let privatized = self.dp.is_some();
            let mut up = Vec::new();
            let mut down = Vec::new();
            for i in (0..m).filter(|&i| self.parts[i].len() > 1) {
                let coord = self.coordinator(i);
                let bytes = param_bytes(&self.models[i]);
                for q in 0..self.parts[i].len() {
                    let c = Node::client(i, q);
                    up.push(Transfer::new(c, coord, bytes, PayloadKind::PartialGradient { privatized }));
                    down.push(Transfer::new(coord, c, bytes, PayloadKind::AggregatedGradient));
                }
            }
            self.ledger.record_round(&up, &self.profile);
            self.ledger.record_round(&down, &self.profile);
        }
        if let Some(dp) = self.dp.as_mut() {
            dp.acc.record(1);
        }
        self.trace();
        Ok(())
    }

    fn run_sgd(&mut self) -> Result<()> {
        let m = self.models.len();
        let d_c = self.models[0].d_out();
        let mut server = SgdServerState::new(m, self.n, d_c);
        for epoch in 1..=self.cfg.epochs {
            let batches = shuffled_batches(self.n, self.batch, self.cfg.seed, epoch - 1);
            for (step, batch) in batches.iter().enumerate() {
                let r = match self.cfg.algo {
                    Algorithm::VflSgd => self.vfl_sgd_step(epoch, step, batch),
                    _ => self.rfl_sgd_step(&mut server, epoch, step, batch),
                };
                r.map_err(|e| Error::Epoch { epoch, source: Box::new(e) })?;
            }
            self.end_epoch(epoch)
                .map_err(|e| Error::Epoch { epoch, source: Box::new(e) })?;
        }
        Ok(())
    }

    fn run_centralized(&mut self) -> Result<()> {
        let xs = self.train_x.clone();
        let y = self.y().to_vec();
        let mut trainer = CentralizedTrainer::new(
            &xs,
            &y,
            BlockModel::new(self.models.clone()),
            self.cfg.loss,
            self.cfg.lr,
        )?;
        for epoch in 1..=self.cfg.epochs {
            for batch in shuffled_batches(self.n, self.batch, self.cfg.seed, epoch - 1) {
                trainer
                    .step(&batch)
                    .map_err(|e| Error::Epoch { epoch, source: Box::new(e) })?;
                self.models = trainer.model.blocks.clone();
                self.trace();
            }
            self.models = trainer.model.blocks.clone();
            self.end_epoch(epoch)
                .map_err(|e| Error::Epoch { epoch, source: Box::new(e) })?;
        }
        Ok(())
    }

    // ---- ADMM family ------------------------------------------------------

    /// `steps` local DP-SGD steps on a θ-subproblem. `extra` is the
    /// gradient of the data-independent part of the objective.
    #[allow(clippy::too_many_arguments)]
    fn private_local_steps(
        &self,
        model: &mut LocalModel,
        x: ArrayView2<f64>,
        agg: &AggregatedVars,
        extra: &dyn Fn(&LocalModel) -> Array1<f64>,
        coords: [u64; 3],
    ) -> Result<()> {
        let dp = self.dp.as_ref().expect("feature DP configured");
        let rows = x.nrows();
        let sample = ((dp.q * rows as f64).round() as usize).clamp(1, rows.max(1));
        let mut pick = rng::stream(self.cfg.seed, Purpose::Subsample, &coords);
        let mut noise = rng::stream(self.cfg.seed, Purpose::GradientNoise, &coords);
        for _ in 0..self.cfg.local_steps {
            let mut g = extra(model);
            if rows > 0 {
                let mut idx = rand::seq::index::sample(&mut pick, rows, sample).into_vec();
                idx.sort_unstable();
                let xs = x.select(Axis(0), &idx);
                let sub = AggregatedVars {
                    org: agg.org,
                    y: agg.y.select(Axis(0), &idx),
                    counts: idx.iter().map(|&r| agg.counts[r]).collect(),
                };
                let up = aux_upstream(model, xs.view(), &sub, self.cfg.rho)?;
                let per_sample = model.per_sample_gradients(xs.view(), up.view())?;
                let sum = noisy_clipped_sum(per_sample.view(), dp.clip, dp.sigma, &mut noise)?;
                g.scaled_add(rows as f64 / (self.n as f64 * sample as f64), &sum);
            }
            model.descend(self.cfg.local_lr, &g);
            let _ = noise.random::<u8>();
        }
        Ok(())
    }

    fn run_admm(&mut self) -> Result<()> {
        let m = self.models.len();
        let d_c = self.models[0].d_out();
        let vfl = self.cfg.algo == Algorithm::VflAdmm;
        let mut server = AdmmServerState::new(m, self.n, d_c, self.cfg.rho)?;
        let mut consensus: Vec<Option<ConsensusState>> = Vec::with_capacity(m);
        let mut part_models: Vec<Vec<LocalModel>> = Vec::with_capacity(m);
        for i in 0..m {
            let q = self.parts[i].len();
            if q > 1 {
                consensus.push(Some(ConsensusState::new(
                    self.models[i].params().clone(),
                    q,
                    m,
                    self.cfg.rho_h(),
                    self.cfg.inner_rounds,
                    self.cfg.local_steps,
                    self.cfg.w_penalty,
                )?));
            } else {
                consensus.push(None);
            }
            part_models.push(vec![self.models[i].clone(); q]);
        }
        for epoch in 1..=self.cfg.epochs {
            self.admm_epoch(epoch, vfl, &mut server, &mut consensus, &mut part_models)
                .map_err(|e| Error::Epoch { epoch, source: Box::new(e) })?;
            self.end_epoch(epoch)
                .map_err(|e| Error::Epoch { epoch, source: Box::new(e) })?;
        }
        Ok(())
    }

    fn admm_epoch(
        &mut self,
        epoch: usize,
        vfl: bool,
        server: &mut AdmmServerState,
        consensus: &mut [Option<ConsensusState>],
        part_models: &mut [Vec<LocalModel>],
    ) -> Result<()> {
        let m = self.models.len();
        let n = self.n;
        let d_c = server.z.ncols();

        // Gather.
        let preds = client_map(self.cfg.parallel, m, |i| {
            let x = if vfl { &self.train_x[i] } else { &self.xs[i] };
            self.models[i].forward(x.view())
        })?;
        let mut round = Vec::new();
        for i in 0..m {
            for (q, range) in self.parts[i].iter().enumerate() {
                let rows = if vfl { n } else { range.len() };
                round.push(Transfer::new(
                    Node::client(i, q),
                    Node::Server,
                    (rows * d_c * 8) as u64,
                    PayloadKind::Predictions,
                ));
            }
        }
        if vfl {
            for (i, h) in preds.into_iter().enumerate() {
                server.set_joined_predictions(i, h)?;
            }
        } else {
            let msgs: Vec<Predictions> = preds
                .into_iter()
                .enumerate()
                .map(|(org, values)| Predictions { org, values })
                .collect();
            server.gather_predictions(&msgs, &self.setup.train, &self.table_rows)?;
        }
        self.ledger.record_round(&round, &self.profile);

        // Server updates and scatter.
        server.z_update(&self.cfg.loss, self.setup.train_labels())?;
        server.lambda_update();
        self.residuals.push(server.primal_residual());
        let aggs: Vec<AggregatedVars> = (0..m)
            .map(|i| {
                if vfl {
                    server.aggregate_unreduced(i)
                } else {
                    server.aggregate(&self.setup.reverse, i)
                }
            })
            .collect();
        let first = epoch == 1;
        let mut round = Vec::new();
        let mut slices: Vec<Vec<AggregatedVars>> = Vec::with_capacity(m);
        for i in 0..m {
            let mut per = Vec::new();
            for (q, range) in self.parts[i].iter().enumerate() {
                let (bytes, rows) = if vfl {
                    ((n * d_c * 8) as u64, n)
                } else {
                    let sl = aggs[i].slice(range.clone());
                    let b = sl.wire_bytes(first);
                    per.push(sl);
                    (b, range.len())
                };
                round.push(
                    Transfer::new(Node::Server, Node::client(i, q), bytes, PayloadKind::AuxVariables)
                        .with_rows(rows as u64),
                );
            }
            slices.push(per);
        }
        self.ledger.record_round(&round, &self.profile);

        // Organizations with a single client solve their θ-subproblem.
        let beta = self.cfg.loss.effective_beta();
        let singles: Vec<usize> = (0..m).filter(|&i| self.parts[i].len() == 1).collect();
        let updated = client_map(self.cfg.parallel, singles.len(), |k| {
            let i = singles[k];
            let x = if vfl { self.train_x[i].view() } else { self.xs[i].view() };
            let agg = &aggs[i];
            let mut model = self.models[i].clone();
            if self.dp.is_some() {
                let extra = |mm: &LocalModel| beta * mm.l2_penalty_grad();
                self.private_local_steps(&mut model, x, agg, &extra, [i as u64, 0, epoch as u64])?;
            } else {
                ThetaProblem { x, agg, rho: self.cfg.rho, beta, joined_rows: n }.solve(
                    &mut model,
                    self.cfg.local_steps,
                    self.cfg.local_lr,
                )?;
            }
            Ok(model)
        })?;
        for (k, model) in updated.into_iter().enumerate() {
            self.models[singles[k]] = model;
        }
        let mut local_steps = self.cfg.local_steps as u64;

        // Organizations split horizontally run consensus rounds.
        let multi: Vec<usize> = (0..m).filter(|&i| self.parts[i].len() > 1).collect();
        if !multi.is_empty() {
            local_steps *= self.cfg.inner_rounds as u64;
            let jobs: Vec<(usize, usize)> = multi
                .iter()
                .flat_map(|&i| (0..self.parts[i].len()).map(move |q| (i, q)))
                .collect();
            let privatized = self.dp.is_some();
            for t in 0..self.cfg.inner_rounds {
                let thetas = client_map(self.cfg.parallel, jobs.len(), |k| {
                    let (i, q) = jobs[k];
                    let cons = consensus[i].as_ref().expect("consensus state");
                    let range = self.parts[i][q].clone();
                    let x = self.xs[i].slice(s![range, ..]);
                    let agg = &slices[i][q];
                    let prob = ConsensusProblem {
                        x,
                        agg,
                        rho: self.cfg.rho,
                        joined_rows: n,
                        w: cons.w.view(),
                        u: cons.u[q].view(),
                        rho_h: cons.rho_h,
                    };
                    let mut model = part_models[i][q].clone();
                    if privatized && x.nrows() > 0 {
                        let extra = |mm: &LocalModel| prob.prox_gradient(mm);
                        let coords = [i as u64, (q as u64) << 32 | t as u64, epoch as u64];
                        self.private_local_steps(&mut model, x, agg, &extra, coords)?;
                    } else {
                        prob.solve(&mut model, self.cfg.local_steps, self.cfg.local_lr)?;
                    }
                    Ok(model)
                })?;
                let mut up = Vec::new();
                let mut down = Vec::new();
                for (k, model) in thetas.into_iter().enumerate() {
                    let (i, q) = jobs[k];
                    let bytes = param_bytes(&model);
                    let c = Node::client(i, q);
                    up.push(Transfer::new(c, self.coordinator(i), bytes, PayloadKind::Parameters { privatized }));
                    down.push(Transfer::new(self.coordinator(i), c, 2 * bytes, PayloadKind::ConsensusVariables));
                    part_models[i][q] = model;
                }
                self.ledger.record_round(&up, &self.profile);
                for &i in &multi {
                    let cons = consensus[i].as_mut().expect("consensus state");
                    let thetas: Vec<Array1<f64>> =
                        part_models[i].iter().map(|pm| pm.params().clone()).collect();
                    let mask = self.models[i].reg_mask();
                    cons.w_update(&thetas, mask.view(), beta)?;
                    cons.u_update(&thetas);
                }
                self.ledger.record_round(&down, &self.profile);
            }
            for &i in &multi {
                let w = consensus[i].as_ref().expect("consensus state").w.clone();
                self.models[i].set_params(w)?;
            }
        }
        if let Some(dp) = self.dp.as_mut() {
            dp.acc.record(local_steps);
        }
        Ok(())
    }
}

/// Trains on an in-memory dataset and returns metrics, models and the
/// communication ledger. No files are written.
pub fn train(ds: &Dataset, cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let class_count = ds.class_count();
    cfg.loss.validate(class_count)?;
    let d_c = cfg.loss.output_dim(class_count);
    let profile = cfg.net.profile()?;
    let setup = setup(ds, cfg)?;
    let n = setup.train.num_rows();
    let batch = cfg.batch_size.unwrap_or_else(|| (n / 10).clamp(1, 10_000));
    if batch > n {
        return Err(Error::Config(format!("batch_size {batch} exceeds {n} training rows")));
    }
    let m = ds.num_orgs();
    let xs = ds.features();
    let train_x: Vec<Array2<f64>> = (0..m).map(|i| setup.train.gather_rows(i, &xs[i])).collect();
    let test_x: Vec<Array2<f64>> = (0..m).map(|i| setup.test.gather_rows(i, &xs[i])).collect();
    let table_rows = ds.table_rows();
    let unions = matches!(cfg.algo, Algorithm::RflSgd | Algorithm::RflAdmm);
    let parts: Vec<Vec<Range<usize>>> = ds
        .tables
        .iter()
        .map(|t| {
            if unions {
                (0..t.num_partitions()).map(|q| t.partition_range(q)).collect()
            } else {
                vec![0..t.num_rows()]
            }
        })
        .collect();
    let bias_org = match &cfg.bias_table {
        Some(name) => ds
            .query
            .tables
            .iter()
            .position(|t| &t.table_name == name)
            .ok_or_else(|| Error::Config(format!("bias_table `{name}` is not in the query")))?,
        None => ds.label_org()?,
    };
    let models: Vec<LocalModel> = (0..m)
        .map(|i| {
            LocalModel::new(
                cfg.model,
                xs[i].ncols(),
                d_c,
                i == bias_org,
                rng::derive_seed(cfg.seed, Purpose::Init, &[i as u64]),
            )
        })
        .collect();

    let any_union = parts.iter().any(|p| p.len() > 1);
    let dp = if cfg.dp.feature_dp() {
        let (q, steps) = if cfg.algo.is_sgd() {
            (batch as f64 / n as f64, (cfg.epochs * n.div_ceil(batch)) as u64)
        } else {
            let q = cfg.dp.subsample_r.unwrap_or(batch as f64 / n as f64);
            let inner = if cfg.algo == Algorithm::RflAdmm && any_union { cfg.inner_rounds } else { 1 };
            (q, (cfg.epochs * cfg.local_steps * inner) as u64)
        };
        let sigma = match cfg.dp.target_epsilon {
            Some(eps) => calibrate_sigma(eps, steps, q, cfg.dp.delta)?,
            None => cfg.dp.sigma,
        };
        Some(FeatureDp {
            sigma,
            clip: cfg.dp.clip,
            q,
            acc: FeatureAccountant::new(q, sigma, cfg.dp.delta)?,
        })
    } else {
        None
    };

    let meta = RunMeta {
        algo: cfg.algo,
        epochs: cfg.epochs,
        joined_rows: n,
        batch_size: batch,
        table_rows: table_rows.clone(),
        partitions: parts.iter().map(Vec::len).collect(),
        inner_rounds: cfg.inner_rounds,
        output_dim: d_c,
        param_counts: models.iter().map(LocalModel::num_params).collect(),
    };

    let init_params = models.iter().map(|m| m.params().clone()).collect();
    let mut ctx = Ctx {
        cfg,
        setup,
        xs,
        train_x,
        test_x,
        table_rows,
        profile,
        n,
        batch,
        parts,
        dp,
        ledger: NetLedger::new(),
        models,
        metrics: Vec::new(),
        epoch_params: Vec::new(),
        step_params: Vec::new(),
        residuals: Vec::new(),
    };

    if cfg.algo != Algorithm::Centralized {
        let round: Vec<Transfer> = ctx
            .setup
            .messages
            .iter()
            .map(|msg| {
                let kind = match &msg.labels {
                    Some(_) => PayloadKind::Labels {
                        perturbed: cfg.dp.label_dp(),
                    },
                    None => PayloadKind::JoinKeys,
                };
                Transfer::new(Node::client(msg.owner.org, msg.owner.part), Node::Server, msg.wire_bytes(), kind)
            })
            .collect();
        ctx.ledger.record_round(&round, &ctx.profile);
    }
    ctx.ledger.snapshot(0);

    match cfg.algo {
        Algorithm::Centralized => ctx.run_centralized()?,
        a if a.is_sgd() => ctx.run_sgd()?,
        _ => ctx.run_admm()?,
    }

    Ok(RunOutput {
        sigma: ctx.dp.as_ref().map(|d| d.sigma),
        metrics: ctx.metrics,
        models: ctx.models,
        ledger: ctx.ledger,
        meta,
        init_params,
        epoch_params: ctx.epoch_params,
        step_params: ctx.step_params,
        primal_residuals: ctx.residuals,
        setup: ctx.setup,
    })
}
