"""Three-stage training: source pre-training, source cluster organisation, adaptation."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from .clusters import (ClusterState, compute_centroids, compute_target_centroids, mean_classifier_discrepancy,
                       mean_intra_cluster_distance, select_confident, selection_counts)
from .evaluate import emit_report, evaluate
from .net import BiClassifierNet, NetConfig, Normalizer
from .prep import PrepConfig, build_dataset, read_cache
from .records import NUM_CLASSES, BeatClass, LabeledDataset, augment, load_records

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    e1: int = 30
    e2: int = 10
    e3: int = 20
    batch_size: int = 512
    lr: float = 0.001
    weight_decay: float = 0.0005
    seed: int = 0
    alpha: float = 0.5
    gamma1: float = 0.1
    gamma2: float = 0.1
    beta1: float = 0.1
    beta2: float = 0.1
    beta3: float = 0.5
    beta4: float = 0.1
    t_m: float = 10.0
    dro_mode: str = "max"
    dro_eta: float = 0.01
    refresh_target_centroids: bool = True
    confidence: float = 0.99
    aug_n: int = 0
    aug_v: int = 2
    aug_s: int = 5
    aug_f: int = 10
    class_weight_mode: str = "inverse"

    def __post_init__(self):
        for e in ("e1", "e2", "e3"):
            if getattr(self, e) < 1:
                raise ValueError(f"{e} must be >= 1")
        if self.batch_size < NUM_CLASSES:
            raise ValueError(f"batch_size must be >= {NUM_CLASSES}")
        if self.dro_mode not in ("max", "ema"):
            raise ValueError(f"dro_mode must be max or ema, got {self.dro_mode!r}")
        if self.class_weight_mode not in ("inverse", "none"):
            raise ValueError(f"class_weight_mode must be inverse or none, got {self.class_weight_mode!r}")
        self.loss_weights  # validates the weights

    @property
    def loss_weights(self) -> L.LossWeights:
        return L.LossWeights(self.alpha, self.gamma1, self.gamma2, self.beta1, self.beta2, self.beta3, self.beta4, self.t_m)

    @property
    def factors(self) -> dict[BeatClass, int]:
        return {BeatClass.N: self.aug_n, BeatClass.V: self.aug_v, BeatClass.S: self.aug_s, BeatClass.F: self.aug_f}

    def adam(self, model: BiClassifierNet) -> ad.Adam:
        return ad.Adam(model.params, lr=self.lr, weight_decay=self.weight_decay)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class StageReport:
    stage: str
    seed: int
    epochs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0

    def series(self, key: str) -> list[float]:
        return [e[key] for e in self.epochs]

    def to_jsonl(self) -> str:
        # wall time is deliberately left out so artifacts are reproducible
        return "".join(json.dumps({"stage": self.stage, "seed": self.seed, **e}, sort_keys=True) + "\n" for e in self.epochs)


class StageError(RuntimeError):
    pass


# ------------------------------------------------------------------- batching


def epoch_batches(n: int, batch_size: int, seed: int, stage: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches; the order is a function of (seed, stage, epoch)."""
    perm = np.random.default_rng([seed, stage, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


class CyclingSampler:
    """Endless reshuffled pass over ``n`` indices, seeded per (seed, stage) and cycle."""

    def __init__(self, n: int, seed: int, stage: int):
        if n == 0:
            raise ValueError("cannot sample from an empty dataset")
        self.n, self.seed, self.stage = n, seed, stage
        self.cycle, self.pos = 0, 0
        self.perm = self._perm()

    def _perm(self) -> np.ndarray:
        return np.random.default_rng([self.seed, self.stage, 1_000_003, self.cycle]).permutation(self.n)

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos == self.n:
                self.cycle += 1
                self.pos = 0
                self.perm = self._perm()
            step = min(k, self.n - self.pos)
            out.append(self.perm[self.pos:self.pos + step])
            self.pos += step
            k -= step
        return np.concatenate(out)


def class_weights(ds: LabeledDataset, cfg: TrainConfig) -> np.ndarray:
    if cfg.class_weight_mode == "none":
        return np.ones(NUM_CLASSES, dtype=np.float32)
    return L.class_weights_from_counts(np.bincount(ds.labels, minlength=NUM_CLASSES))


def _inputs(model: BiClassifierNet, ds: LabeledDataset, idx: np.ndarray):
    return ds.waveforms[idx], model.normalizer(ds.time_feats[idx])


class _EpochLog:
    def __init__(self):
        self.sums: dict[str, float] = {}
        self.steps = 0

    def add(self, **vals):
        for k, v in vals.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(np.asarray(v.data if isinstance(v, ad.Tensor) else v))
        self.steps += 1

    def means(self) -> dict[str, float]:
        return {k: v / max(self.steps, 1) for k, v in self.sums.items()}


def _step(opt: ad.Adam, total: ad.Tensor) -> None:
    opt.zero_grad()
    ad.backward(total)
    opt.step()


# --------------------------------------------------------------------- stages


def pretrain(model: BiClassifierNet, source: LabeledDataset, cfg: TrainConfig, fit_normalizer: bool = True) -> StageReport:
    """E1 epochs of ``L_cls + alpha * L_dis`` on labeled source data."""
    t0 = time.perf_counter()
    if not source.labeled:
        raise ValueError("pretrain needs labeled source data")
    if fit_normalizer:
        model.normalizer = Normalizer.fit(source.time_feats)
    w, cw = cfg.loss_weights, class_weights(source, cfg)
    dro = L.GroupDROState(eta=cfg.dro_eta)
    opt = cfg.adam(model)
    report = StageReport("pretrain", cfg.seed)
    for epoch in range(cfg.e1):
        acc = _EpochLog()
        for idx in epoch_batches(len(source), cfg.batch_size, cfg.seed, 1, epoch):
            x, tf = _inputs(model, source, idx)
            y = source.labels[idx]
            feats = model.extract(x)
            l1, l2 = model.classify(feats, tf, normalized=True)
            l_cls = L.classification_loss(l1, l2, y, cw, cfg.dro_mode, dro)
            l_dis = L.discrepancy(ad.softmax(l1), ad.softmax(l2))
            total = L.pretrain_total(l_cls, l_dis, w)
            _step(opt, total)
            acc.add(l_cls=l_cls, l_dis=l_dis, total=total)
        report.epochs.append({"epoch": epoch, **acc.means()})
        log.info("pretrain epoch %d %s", epoch, report.epochs[-1])
    report.wall_time = time.perf_counter() - t0
    return report


def source_statistics(model: BiClassifierNet, source: LabeledDataset):
    """CC_s, M_ctr and M_dis from a full inference pass over the source."""
    out = model.predict(source.waveforms, source.time_feats)
    cc_s = compute_centroids(out["features"], source.labels)
    m_ctr = mean_intra_cluster_distance(out["features"], source.labels, cc_s)
    m_dis = mean_classifier_discrepancy(out["probs1"], out["probs2"])
    return cc_s, m_ctr, m_dis


def organize_source_clusters(model: BiClassifierNet, source: LabeledDataset, cfg: TrainConfig):
    """E2 epochs of ``L_cls + gamma1 * L_comp + gamma2 * L_sep`` against fixed source centroids.

    Returns (report, CC_s, M_ctr, M_dis), statistics recomputed on the updated model.
    """
    t0 = time.perf_counter()
    w, cw = cfg.loss_weights, class_weights(source, cfg)
    dro = L.GroupDROState(eta=cfg.dro_eta)
    opt = cfg.adam(model)
    cc_s, _, _ = source_statistics(model, source)
    report = StageReport("clusters", cfg.seed)
    for epoch in range(cfg.e2):
        acc = _EpochLog()
        for idx in epoch_batches(len(source), cfg.batch_size, cfg.seed, 2, epoch):
            x, tf = _inputs(model, source, idx)
            y = source.labels[idx]
            feats = model.extract(x)
            l1, l2 = model.classify(feats, tf, normalized=True)
            l_cls = L.classification_loss(l1, l2, y, cw, cfg.dro_mode, dro)
            l_comp = L.compacting(feats, y, cc_s)
            l_sep = L.separating(cc_s, w.t_m)
            total = L.cluster_total(l_cls, l_comp, l_sep, w)
            _step(opt, total)
            acc.add(l_cls=l_cls, l_comp=l_comp, l_sep=l_sep, total=total)
        report.epochs.append({"epoch": epoch, **acc.means()})
        log.info("clusters epoch %d %s", epoch, report.epochs[-1])
    cc_s, m_ctr, m_dis = source_statistics(model, source)
    report.wall_time = time.perf_counter() - t0
    return report, cc_s, m_ctr, m_dis


def target_centroids(model: BiClassifierNet, target: LabeledDataset, cc_s, m_ctr, m_dis, confidence: float = 0.99):
    """Confident target selection followed by CC_t. Returns (CC_t, per-class counts, fallback flags)."""
    out = model.predict(target.waveforms, target.time_feats)
    chosen = select_confident(out["features"], out["probs"], out["probs1"], out["probs2"], cc_s, m_ctr, m_dis, confidence)
    cc_t, fallback = compute_target_centroids(chosen, out["features"], cc_s)
    return cc_t, selection_counts(chosen), fallback


def cluster_state(model: BiClassifierNet, target: LabeledDataset, cc_s, m_ctr, m_dis, cfg: TrainConfig) -> ClusterState:
    cc_t, counts, fallback = target_centroids(model, target, cc_s, m_ctr, m_dis, cfg.confidence)
    return ClusterState(cc_s, cc_t, m_ctr, m_dis, counts, fallback)


def adapt(model: BiClassifierNet, source: LabeledDataset, target: LabeledDataset, state: ClusterState,
          cfg: TrainConfig) -> tuple[StageReport, ClusterState]:
    """E3 epochs of the adaptation objective. Target labels are never read.

    Stored centroids stay fixed within an epoch; with ``refresh_target_centroids``
    the confident set and CC_t are recomputed at each epoch end.
    """
    if len(target) == 0:
        raise ValueError("adapt: empty target dataset")
    t0 = time.perf_counter()
    w, cw = cfg.loss_weights, class_weights(source, cfg)
    dro = L.GroupDROState(eta=cfg.dro_eta)
    opt = cfg.adam(model)
    sampler = CyclingSampler(len(target), cfg.seed, 3)
    report = StageReport("adapt", cfg.seed)
    for epoch in range(cfg.e3):
        cc_s, cc_t, cc_m = state.cc_s, state.cc_t, state.cc_m
        sep_s = L.separating(cc_s, w.t_m)
        sep_t = L.separating(cc_t, w.t_m)
        l_cd = L.interdomain_cd(cc_s, cc_t)
        acc = _EpochLog()
        for idx in epoch_batches(len(source), cfg.batch_size, cfg.seed, 3, epoch):
            x, tf = _inputs(model, source, idx)
            y = source.labels[idx]
            fs = model.extract(x)
            l1, l2 = model.classify(fs, tf, normalized=True)
            l_cls = L.classification_loss(l1, l2, y, cw, cfg.dro_mode, dro)

            tidx = sampler.take(len(idx))
            xt, tft = _inputs(model, target, tidx)
            ft = model.extract(xt)
            t1, t2 = model.classify(ft, tft, normalized=True)
            pseudo = np.argmax(ad.softmax(t1).data + ad.softmax(t2).data, axis=1)

            comp_s = L.compacting(fs, y, cc_s)
            comp_t = L.compacting(ft, pseudo, cc_t)
            both = ad.concat([fs, ft], axis=0)
            l_cmb = L.running_combined(L.batch_centroids(both, np.concatenate([y, pseudo])), cc_m)
            total = L.adapt_total(l_cls, comp_s, comp_t, sep_s, sep_t, l_cd, l_cmb, w)
            _step(opt, total)
            acc.add(l_cls=l_cls, l_comp_s=comp_s, l_comp_t=comp_t, l_sep_s=sep_s, l_sep_t=sep_t,
                    l_cd=l_cd, l_cmb=l_cmb, total=total)
        entry = {"epoch": epoch, **acc.means()}
        if cfg.refresh_target_centroids:
            cc_t, counts, fallback = target_centroids(model, target, state.cc_s, state.m_ctr, state.m_dis, cfg.confidence)
            state = state.with_target(cc_t, counts, fallback)
        entry["confident"] = {BeatClass(k).name: int(v) for k, v in sorted(state.confident_count.items())}
        report.epochs.append(entry)
        log.info("adapt epoch %d %s", epoch, entry)
    report.wall_time = time.perf_counter() - t0
    return report, state


# ------------------------------------------------------------------- pipeline


def load_domain(path, domain: str, prep: PrepConfig, rr_mean: int | None = None) -> tuple[LabeledDataset, int]:
    """Record tree or ``.seg`` cache -> dataset (labels kept), plus the RR mean used."""
    path = Path(path)
    if path.is_file():
        ds, header = read_cache(path)
        if rr_mean is not None and header["rr_mean"] != rr_mean:
            raise ValueError(f"{path}: cached with rr_mean {header['rr_mean']}, expected {rr_mean}")
        return LabeledDataset(ds.waveforms, ds.time_feats, ds.labels, ds.records, ds.r_index, domain), header["rr_mean"]
    records = load_records(path)
    if not records:
        raise FileNotFoundError(f"no records under {path}")
    return build_dataset(records, domain, prep, rr_mean=rr_mean)


def prepare(source_path, target_path, prep: PrepConfig = PrepConfig()):
    """Source (labeled) and target datasets sharing the source RR mean."""
    source, rr_mean = load_domain(source_path, "source", prep)
    target, _ = load_domain(target_path, "target", prep, rr_mean=rr_mean)
    return source, target, rr_mean


def unlabeled(ds: LabeledDataset) -> LabeledDataset:
    return ds.as_target(keep_labels=False)


def checkpoint_meta(cfg: TrainConfig, stage: int, rr_mean: int) -> dict:
    return {"stage": stage, "rr_mean": int(rr_mean), "train_config": asdict(cfg)}


def _write_report(out: Path, report: StageReport) -> None:
    (out / f"{report.stage}_report.jsonl").write_text(report.to_jsonl(), encoding="utf-8")


def evaluation_set(target: LabeledDataset, cfg: TrainConfig, augmented: bool) -> LabeledDataset:
    return augment(target, cfg.factors) if augmented else target


def run_stage1(source, cfg: TrainConfig, out: Path, rr_mean: int, net_cfg: NetConfig = NetConfig()):
    model = BiClassifierNet(net_cfg, seed=cfg.seed)
    src = augment(source, cfg.factors)
    report = pretrain(model, src, cfg)
    model.save(out / "stage1.ckpt", length=source.length, extra=checkpoint_meta(cfg, 1, rr_mean))
    _write_report(out, report)
    return model, report


def run_stage2(model, source, target, cfg: TrainConfig, out: Path, rr_mean: int):
    src = augment(source, cfg.factors)
    report, cc_s, m_ctr, m_dis = organize_source_clusters(model, src, cfg)
    state = cluster_state(model, unlabeled(target), cc_s, m_ctr, m_dis, cfg)
    model.save(out / "stage2.ckpt", length=source.length, extra=checkpoint_meta(cfg, 2, rr_mean))
    state.save(out / "clusters.txt")
    _write_report(out, report)
    return report, state


def run_stage3(model, source, target, state, cfg: TrainConfig, out: Path, rr_mean: int):
    src = augment(source, cfg.factors)
    report, state = adapt(model, src, unlabeled(target), state, cfg)
    model.save(out / "stage3.ckpt", length=source.length, extra=checkpoint_meta(cfg, 3, rr_mean))
    state.save(out / "clusters_adapted.txt")
    _write_report(out, report)
    return report, state


def final_report(model, target, cfg: TrainConfig, out: Path, model_id: str, augmented: bool = True, plot: bool = False,
                 dataset_id: str = "target"):
    cm, rep = evaluate(model, evaluation_set(target, cfg, augmented), dataset_id, model_id, augmented)
    emit_report(rep, cm, out, plot=plot)
    return cm, rep


def run_pipeline(source_path, target_path, cfg: TrainConfig, out_dir, prep: PrepConfig = PrepConfig(),
                 skip_adaptation: bool = False, augmented_eval: bool = True, plot: bool = False):
    """Full three-stage run. Returns (model, reports, cluster state or None, metrics report).

    ``skip_adaptation`` stops after pre-training: the no-adaptation baseline.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = "preprocess"
    try:
        source, target, rr_mean = prepare(source_path, target_path, prep)
        stage = "pretrain"
        model, r1 = run_stage1(source, cfg, out, rr_mean)
        reports, state = [r1], None
        if not skip_adaptation:
            stage = "clusters"
            r2, state = run_stage2(model, source, target, cfg, out, rr_mean)
            stage = "adapt"
            r3, state = run_stage3(model, source, target, state, cfg, out, rr_mean)
            reports += [r2, r3]
        stage = "eval"
        _, rep = final_report(model, target, cfg, out, "baseline" if skip_adaptation else "adapted", augmented_eval, plot)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(f"{stage}: {exc}") from exc
    return model, reports, state, rep
