"""Training regimes: baseline, inference-time interpolation, frozen fusion,
LJP-only, joint LJP + retriever, and joint training with attention distillation."""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import datastore as ds
from . import diffcore as dc
from .config import ConfigError
from .corpus import Corpus, CorpusSplit, task_key
from .diffcore import ParameterStore, Tensor
from .encoder import EncoderConfig, HierarchicalEncoder, OutcomeHead, ljp_loss_from_logits, make_batch
from .fusion import Fusion, FusionConfig, aggregate_attention
from .interpolation import DEFAULT_KS, DEFAULT_LAMBDAS, DEFAULT_TAUS, InterpolationConfig, LabelDistribution, interpolate, p_knn, sweep
from .metrics import EvalReport, evaluate, lor_metric
from .retriever import Retriever, RetrieverTrainConfig, sample_pairs, train_retriever

log = logging.getLogger(__name__)

REGIMES = ("baseline", "inference-only", "frozen-fusion", "train-ljp-only", "train-both", "train-both-kld")
ENC, HEAD, RET, FUS = "enc.", "head.", "ret.", "fus."

# parameter groups that receive gradients in each regime
TRAINABLE = {
    "baseline": (ENC, HEAD),
    "inference-only": (),
    "frozen-fusion": (FUS,),
    "train-ljp-only": (ENC, HEAD, FUS),
    "train-both": (ENC, HEAD, FUS, RET),
    "train-both-kld": (ENC, HEAD, FUS, RET),
}


class MissingArtifact(RuntimeError):
    pass


def derive_seed(seed: int, component: str) -> int:
    """Independent, reproducible sub-seed per component."""
    return int(np.random.SeedSequence([seed, zlib.crc32(component.encode())]).generate_state(1)[0])


@dataclass
class TrainingRegime:
    name: str = "baseline"
    fusion_variant: str = "stacked"
    fusion_layers: int = 4
    retriever_regime: str = "lor"
    epochs: int = 30
    k_train: int = 7
    k_eval: int | None = None
    refresh_every_epochs: int = 1
    kld_weight: float = 1.0
    kld_temperature: float = 1.0
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 100

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.name not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}, got {self.name!r}")
        if self.k_train < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("k_train, epochs and batch_size must be >= 1")
        if self.refresh_every_epochs < 1:
            raise ConfigError("refresh_every_epochs must be >= 1")
        if self.kld_weight < 0:
            raise ConfigError("kld_weight must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        try:
            FusionConfig(self.fusion_variant, self.fusion_layers)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.name == "train-both-kld" and self.fusion_variant == "mean":
            raise ConfigError("attention distillation needs an attention-based fusion variant (cross or stacked)")
        if self.name in ("train-both", "train-both-kld") and self.retriever_regime == "self":
            raise ConfigError("joint retriever training needs a separate retriever (binary or lor)")

    @property
    def trainable(self) -> tuple[str, ...]:
        return TRAINABLE[self.name]

    @property
    def uses_fusion(self) -> bool:
        return self.name in ("frozen-fusion", "train-ljp-only", "train-both", "train-both-kld")

    @property
    def retriever_trainable(self) -> bool:
        return RET in self.trainable

    @property
    def eval_k(self) -> int:
        return self.k_eval or self.k_train


@dataclass
class ModelBundle:
    """Everything sharing one ParameterStore: LJP encoder + head, retriever, fusion."""

    store: ParameterStore
    enc_cfg: EncoderConfig
    n_labels: int
    vocab_size: int
    encoder: HierarchicalEncoder
    head: OutcomeHead
    retriever: Retriever | None = None
    fusion: Fusion | None = None

    @classmethod
    def create(cls, corpus: Corpus, enc_cfg: EncoderConfig, seed: int) -> ModelBundle:
        store = ParameterStore()
        enc = HierarchicalEncoder(store, ENC, enc_cfg, corpus.vocab_size, np.random.default_rng(derive_seed(seed, "encoder")))
        head = OutcomeHead(store, HEAD, enc_cfg.embedding_dim, corpus.n_labels, np.random.default_rng(derive_seed(seed, "head")))
        return cls(store, enc_cfg, corpus.n_labels, corpus.vocab_size, enc, head)

    @classmethod
    def from_store(cls, store: ParameterStore, enc_cfg: EncoderConfig, n_labels: int, vocab_size: int,
                   retriever_regime: str | None = None, fusion_cfg: FusionConfig | None = None) -> ModelBundle:
        """Rebuild the component views over parameters loaded from a checkpoint."""
        for group, needed in ((ENC, True), (HEAD, True), (RET, retriever_regime not in (None, "self")),
                              (FUS, fusion_cfg is not None)):
            if needed and not store.names(group):
                raise MissingArtifact(f"checkpoint has no '{group}' parameters")
        enc = HierarchicalEncoder(store, ENC, enc_cfg, vocab_size)
        if store[ENC + "tok"].shape != (vocab_size, enc_cfg.embedding_dim):
            raise ds.DimensionError(f"checkpoint embedding table {store[ENC + 'tok'].shape} does not match "
                                    f"vocabulary {vocab_size} x {enc_cfg.embedding_dim}")
        out = cls(store, enc_cfg, n_labels, vocab_size, enc, OutcomeHead(store, HEAD, enc_cfg.embedding_dim, n_labels))
        if retriever_regime is not None:
            r_enc = enc if retriever_regime == "self" else HierarchicalEncoder(store, RET, enc_cfg, vocab_size)
            out.retriever = Retriever(retriever_regime, r_enc)
        if fusion_cfg is not None:
            out.fusion = Fusion(store, FUS, fusion_cfg, enc_cfg.embedding_dim, n_labels)
        return out

    def add_retriever(self, regime: str, seed: int) -> Retriever:
        if regime == "self":
            self.retriever = Retriever("self", self.encoder)
        elif self.retriever is None or self.retriever.regime != regime:
            for n in self.store.names(RET):
                del self.store.params[n]
            self.retriever = Retriever.create(regime, self.store, self.enc_cfg, self.vocab_size,
                                              np.random.default_rng(derive_seed(seed, "retriever")))
        return self.retriever

    def attach_retriever_params(self, regime: str, params: ParameterStore) -> Retriever:
        if regime == "self":
            return self.add_retriever("self", 0)
        for n in self.store.names(RET):
            del self.store.params[n]
        self.store.merge(params.subset([RET]))
        self.retriever = Retriever(regime, HierarchicalEncoder(self.store, RET, self.enc_cfg, self.vocab_size))
        return self.retriever

    def add_fusion(self, cfg: FusionConfig, seed: int) -> Fusion:
        for n in self.store.names(FUS):
            del self.store.params[n]
        self.fusion = Fusion(self.store, FUS, cfg, self.enc_cfg.embedding_dim, self.n_labels,
                             np.random.default_rng(derive_seed(seed, "fusion")))
        return self.fusion

    def copy(self) -> ModelBundle:
        store = self.store.copy()
        enc = HierarchicalEncoder(store, ENC, self.enc_cfg, self.vocab_size)
        head = OutcomeHead(store, HEAD, self.enc_cfg.embedding_dim, self.n_labels)
        out = ModelBundle(store, self.enc_cfg, self.n_labels, self.vocab_size, enc, head)
        if self.retriever is not None:
            r_enc = enc if self.retriever.regime == "self" else HierarchicalEncoder(store, RET, self.enc_cfg, self.vocab_size)
            out.retriever = Retriever(self.retriever.regime, r_enc)
        if self.fusion is not None:
            out.fusion = Fusion(store, FUS, self.fusion.cfg, self.enc_cfg.embedding_dim, self.n_labels)
        return out


# --------------------------------------------------------------------------
# forward passes
# --------------------------------------------------------------------------


@dataclass
class StepRecord:
    epoch: int
    ljp_loss: float
    kld_loss: float | None
    total_loss: float
    snapshot_version: int | None
    grad_norms: dict[str, float] = field(default_factory=dict)
    kld_grad_norms: dict[str, float] = field(default_factory=dict)
    self_retrieved: int = 0


def _group_norms(store: ParameterStore, grads: dict[int, np.ndarray] | None = None) -> dict[str, float]:
    out = {}
    for group in (ENC, HEAD, RET, FUS):
        sq = 0.0
        for name in store.names(group):
            t = store[name]
            g = t.grad if grads is None else grads.get(id(t))
            if g is not None:
                sq += float(np.sum(g * g))
        out[group.rstrip(".")] = sq ** 0.5
    return out


def _retrieve_for_train(snapshot: ds.DatastoreSnapshot, ids: Sequence[str], k: int):
    """Search the stale snapshot with the queries' own stored keys, excluding the query itself."""
    pos = np.array([snapshot.position(c) for c in ids])
    return snapshot.search(snapshot.keys[pos], k, [[c] for c in ids])


def _retrieve_for_eval(model: ModelBundle, snapshot: ds.DatastoreSnapshot, cases, k: int):
    q = model.retriever.embed_cases(cases)
    exclude = [[c.id] for c in cases]
    idx, dist = snapshot.search(q, k, exclude)
    return q, idx, dist


def _values(snapshot: ds.DatastoreSnapshot, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    valid = idx >= 0
    vals = snapshot.values[np.where(valid, idx, 0)].astype(np.float64)
    return vals, valid


def predict_probs(model: ModelBundle, corpus: Corpus, ids: Sequence[str], snapshot: ds.DatastoreSnapshot | None,
                  k: int, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray | None]:
    """Per-label probabilities (n, A) and, when fusion is on, the retrieved indices (n, k)."""
    cases = corpus.subset(ids)
    probs = np.zeros((len(ids), model.n_labels))
    all_idx = np.full((len(ids), k), -1, dtype=np.int64) if model.fusion is not None else None
    with dc.no_grad():
        for start in range(0, len(cases), batch_size):
            chunk = cases[start:start + batch_size]
            h = model.encoder.encode(make_batch(chunk, model.enc_cfg))
            if model.fusion is not None:
                _, idx, _ = _retrieve_for_eval(model, snapshot, chunk, k)
                vals, valid = _values(snapshot, idx)
                keys = snapshot.keys[np.where(valid, idx, 0)]
                h, _ = model.fusion(h, Tensor(keys), vals, valid)
                all_idx[start:start + len(chunk)] = idx
            probs[start:start + len(chunk)] = model.head.classify(h).data
    return probs, all_idx


def evaluate_split(model: ModelBundle, corpus: Corpus, ids: Sequence[str], task: str,
                   snapshot: ds.DatastoreSnapshot | None, k: int, train_alleged: np.ndarray | None = None) -> EvalReport:
    probs, idx = predict_probs(model, corpus, ids, snapshot, k)
    gold = corpus.label_matrix(ids, task)
    alleged = corpus.alleged_matrix(ids)
    report = evaluate(probs > 0.5, gold, task, alleged)
    if idx is not None and train_alleged is not None:
        valid = idx >= 0
        from .metrics import lor_at_k

        report.lor_at_k = lor_at_k(alleged, train_alleged[np.where(valid, idx, 0)], valid)
    return report


def kld_loss(a, s_raw, tau_s: float = 1.0, mask: np.ndarray | None = None) -> Tensor:
    """KL(a || softmax(s_raw / tau_s)), averaged over queries.

    ``a`` is the aggregated fusion attention and is treated as a constant, so
    gradients reach only whatever produced the retriever scores ``s_raw``.
    """
    s_raw = s_raw if isinstance(s_raw, Tensor) else Tensor(np.asarray(s_raw, dtype=np.float64))
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    if a.shape != s_raw.shape:
        raise dc.ShapeError("kld_loss", a.shape, s_raw.shape, detail="attention and scores need equal length")
    if tau_s <= 0:
        raise ValueError(f"tau_s must be > 0, got {tau_s}")
    s = dc.softmax(dc.scale(s_raw, 1.0 / tau_s), mask=mask)
    return dc.kl_divergence(a, s)


# --------------------------------------------------------------------------
# one optimisation step
# --------------------------------------------------------------------------


def train_step(model: ModelBundle, corpus: Corpus, ids: Sequence[str], task: str, regime: TrainingRegime,
               opt: ParameterStore, snapshot: ds.DatastoreSnapshot | None, lr_args: tuple[int, int],
               epoch: int = 0) -> StepRecord:
    cases = corpus.subset(ids)
    gold = corpus.label_matrix(ids, task)
    model.store.set_trainable(regime.trainable)
    model.store.zero_grad()

    h = model.encoder.encode(make_batch(cases, model.enc_cfg))
    kld_t = None
    self_hits = 0
    if regime.uses_fusion:
        if snapshot is None:
            raise ConfigError(f"regime {regime.name} needs a datastore snapshot")
        if snapshot.dim != model.retriever.dim:
            raise ds.DimensionError(f"snapshot dimension {snapshot.dim} != retriever dimension {model.retriever.dim}")
        idx, _ = _retrieve_for_train(snapshot, ids, regime.k_train)
        vals, valid = _values(snapshot, idx)
        self_hits = sum(int(cid in {snapshot.case_ids[i] for i in row if i >= 0}) for cid, row in zip(ids, idx))
        B, K = idx.shape
        if regime.retriever_trainable:
            # live re-encoding of the retrieved keys (and the queries, for the similarity scores)
            retrieved = [snapshot.case_ids[i] for i in np.where(valid, idx, idx[:, :1]).reshape(-1)]
            uniq = sorted(set(retrieved) | set(ids))
            where = {c: n for n, c in enumerate(uniq)}
            emb = model.retriever.embed(make_batch(corpus.subset(uniq), model.enc_cfg))
            keys = dc.reshape(dc.take_rows(emb, np.array([where[c] for c in retrieved])), (B, K, model.retriever.dim))
            q_ret = dc.take_rows(emb, np.array([where[c] for c in ids]))
        else:
            keys = Tensor(snapshot.keys[np.where(valid, idx, 0)])
            q_ret = None
        h, trace = model.fusion(h, keys, vals, valid)
    logits = model.head.logits(h)
    ljp = ljp_loss_from_logits(logits, gold)
    dc.backward(ljp)
    grad_norms = _group_norms(model.store)

    kld_val, kld_norms = None, {}
    if regime.name == "train-both-kld":
        a = aggregate_attention(trace)
        s_raw = dc.sum(dc.mul(dc.reshape(q_ret, (B, 1, model.retriever.dim)), keys), axis=-1)
        kld_t = kld_loss(a, s_raw, regime.kld_temperature, valid)
        kgrads = dc.backward(kld_t, accumulate=False)
        kld_norms = _group_norms(model.store, kgrads)
        for t in model.store.tensors():
            g = kgrads.get(id(t))
            if g is not None:
                g = regime.kld_weight * g
                t.grad = g if t.grad is None else t.grad + g
        kld_val = kld_t.item()
        if kld_val < -1e-12:
            raise FloatingPointError(f"negative KL divergence {kld_val}")

    total = ljp.item() + (regime.kld_weight * kld_val if kld_val is not None else 0.0)
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite loss {total} at epoch {epoch}")
    dc.adam_step(opt, regime.lr, *lr_args)
    return StepRecord(epoch, ljp.item(), kld_val, total, None if snapshot is None else snapshot.version,
                      grad_norms, kld_norms, self_hits)


# --------------------------------------------------------------------------
# regime driver
# --------------------------------------------------------------------------


@dataclass
class RegimeResult:
    regime: str
    task: str
    seed: int
    best_epoch: int
    validation: EvalReport
    test: EvalReport
    model: ModelBundle
    snapshot: ds.DatastoreSnapshot | None = None
    history: list[dict] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    snapshot_versions: list[list[int]] = field(default_factory=list)
    refreshes: int = 0
    interpolation: InterpolationConfig | None = None
    sweep_rows: list[dict] | None = None
    seconds: float = 0.0

    def metrics_row(self) -> dict:
        t = self.test
        return {
            "regime": self.regime, "task": self.task, "seed": self.seed,
            "macro_f1": t.macro_f1, "micro_f1": t.micro_f1,
            "hard_macro_f1": t.hard_macro_f1, "lor": t.lor_at_k,
            "best_epoch": self.best_epoch,
        }


def fit(model: ModelBundle, corpus: Corpus, split: CorpusSplit, task: str, regime: TrainingRegime, seed: int,
        snapshot: ds.DatastoreSnapshot | None = None, record_steps: bool = False) -> RegimeResult:
    """Train ``model`` in place under ``regime``; keeps the best validation epoch."""
    task = task_key(task)
    started = time.perf_counter()
    rng = np.random.default_rng(derive_seed(seed, f"batches/{regime.name}"))
    train_ids = list(split.train)
    train_alleged = corpus.alleged_matrix(train_ids)
    holder = ds.Datastore(snapshot) if snapshot is not None else None
    opt = model.store.subset(regime.trainable)
    steps_per_epoch = (len(train_ids) + regime.batch_size - 1) // regime.batch_size
    total = steps_per_epoch * regime.epochs
    lr_args = (min(regime.warmup_steps, total // 10), total)
    refresh_live = regime.uses_fusion and regime.retriever_trainable

    best = (-np.inf, None, None, None)
    history, steps, versions = [], [], []
    refreshes = 0
    for epoch in range(regime.epochs):
        snap = holder.current if holder else None
        order = rng.permutation(len(train_ids))
        seen_versions = []
        epoch_loss = 0.0
        for s in range(steps_per_epoch):
            batch = [train_ids[i] for i in order[s * regime.batch_size:(s + 1) * regime.batch_size]]
            rec = train_step(model, corpus, batch, task, regime, opt, snap, lr_args, epoch)
            if rec.self_retrieved:
                raise AssertionError("a training query retrieved itself")
            epoch_loss += rec.total_loss
            if rec.snapshot_version is not None:
                seen_versions.append(rec.snapshot_version)
            if record_steps:
                steps.append(rec)
        model.store.set_trainable(())
        model.store.zero_grad()
        versions.append(seen_versions)
        if refresh_live and (epoch + 1) % regime.refresh_every_epochs == 0:
            holder.refresh(corpus, model.retriever)
            refreshes += 1
        snap = holder.current if holder else None
        val = evaluate_split(model, corpus, split.validation, task, snap, regime.eval_k, train_alleged)
        history.append({"epoch": epoch + 1, "loss": epoch_loss / steps_per_epoch, "val_macro_f1": val.macro_f1,
                        "val_micro_f1": val.micro_f1, "val_hard_macro_f1": val.hard_macro_f1,
                        "snapshot_version": None if snap is None else snap.version})
        log.info("%s task %s epoch %d loss %.4f val macro-F1 %.4f", regime.name, task, epoch + 1,
                 history[-1]["loss"], val.macro_f1)
        if val.macro_f1 > best[0]:
            best = (val.macro_f1, epoch + 1, model.store.snapshot(), snap)

    _, best_epoch, params, best_snap = best
    model.store.restore(params)
    val = evaluate_split(model, corpus, split.validation, task, best_snap, regime.eval_k, train_alleged)
    test = evaluate_split(model, corpus, split.test, task, best_snap, regime.eval_k, train_alleged)
    if not regime.uses_fusion:
        val.lor_at_k = test.lor_at_k = None
    return RegimeResult(regime.name, task, seed, best_epoch, val, test, model, best_snap, history, steps,
                        versions, refreshes, seconds=time.perf_counter() - started)


def run_inference_only(model: ModelBundle, corpus: Corpus, split: CorpusSplit, task: str, seed: int,
                       snapshot: ds.DatastoreSnapshot, k_grid=DEFAULT_KS, lambda_grid=DEFAULT_LAMBDAS,
                       tau_grid=DEFAULT_TAUS) -> RegimeResult:
    """Sweep (k, lambda, tau) on validation, then score the test split with the best point."""
    task = task_key(task)
    started = time.perf_counter()
    train_alleged = corpus.alleged_matrix(list(split.train))
    kmax = max(k_grid)

    def pieces(ids):
        probs, _ = predict_probs(_without_fusion(model), corpus, ids, None, 1)
        cases = corpus.subset(ids)
        _, idx, dist = _retrieve_for_eval(model, snapshot, cases, kmax)
        return probs, idx, dist

    vp, vi, vd = pieces(split.validation)
    result = sweep(vp, vi, vd, snapshot.values, corpus.label_matrix(split.validation, task), task,
                   corpus.alleged_matrix(split.validation), corpus.alleged_matrix(split.validation), train_alleged,
                   k_grid, lambda_grid, tau_grid)
    best = result.best

    def score(ids, probs, idx, dist):
        final = apply_interpolation(probs, idx, dist, snapshot.values, best)
        rep = evaluate(final.predict(), corpus.label_matrix(ids, task), task, corpus.alleged_matrix(ids))
        valid = idx[:, :best.k] >= 0
        from .metrics import lor_at_k

        rep.lor_at_k = lor_at_k(corpus.alleged_matrix(ids), train_alleged[np.where(valid, idx[:, :best.k], 0)], valid)
        return rep

    val = score(split.validation, vp, vi, vd)
    tp, ti, td = pieces(split.test)
    test = score(split.test, tp, ti, td)
    return RegimeResult("inference-only", task, seed, 0, val, test, model, snapshot,
                        interpolation=best, sweep_rows=result.rows, seconds=time.perf_counter() - started)


def apply_interpolation(probs, idx, dist, store_values, cfg: InterpolationConfig) -> LabelDistribution:
    k_idx = idx[:, :cfg.k]
    valid = k_idx >= 0
    vals = np.asarray(store_values, dtype=bool)[np.where(valid, k_idx, 0)]
    nn = p_knn(np.where(valid, dist[:, :cfg.k], np.inf), vals, cfg.tau, valid)
    return interpolate(LabelDistribution.from_p1(probs), nn, cfg.lam)


def _without_fusion(model: ModelBundle) -> ModelBundle:
    return replace(model, fusion=None)


# --------------------------------------------------------------------------
# whole-experiment helper: shared baseline / retriever per seed
# --------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    enc: EncoderConfig = field(default_factory=EncoderConfig)
    retriever_train: RetrieverTrainConfig = field(default_factory=RetrieverTrainConfig)
    baseline_epochs: int = 30
    fusion_epochs: int = 30
    k_train: int = 7
    batch_size: int = 32
    lr: float = 1e-3
    fusion_lr: float | None = None
    warmup_steps: int = 100
    kld_weight: float = 1.0
    refresh_every_epochs: int = 1
    fusion_layers: int = 4
    fusion_variant: str = "stacked"
    retriever_regime: str = "lor"


class Experiment:
    """Caches the per-seed baseline model and retrievers so regimes share them."""

    def __init__(self, corpus: Corpus, split: CorpusSplit, cfg: ExperimentConfig, seed: int):
        self.corpus = corpus
        self.split = split
        self.cfg = cfg
        self.seed = seed
        self.baseline_results: dict[str, RegimeResult] = {}
        self.baselines: dict[str, ModelBundle] = {}
        self.retrievers: dict[str, tuple[ParameterStore, dict]] = {}

    def regime(self, name: str, **kw) -> TrainingRegime:
        c = self.cfg
        epochs = c.baseline_epochs if name == "baseline" else c.fusion_epochs
        lr = c.lr if name == "baseline" or c.fusion_lr is None else c.fusion_lr
        base = dict(name=name, epochs=epochs, k_train=c.k_train, batch_size=c.batch_size, lr=lr,
                    warmup_steps=c.warmup_steps, kld_weight=c.kld_weight, refresh_every_epochs=c.refresh_every_epochs,
                    fusion_layers=c.fusion_layers, fusion_variant=c.fusion_variant,
                    retriever_regime=c.retriever_regime)
        base.update(kw)
        return TrainingRegime(**base)

    def baseline(self, task: str) -> RegimeResult:
        task = task_key(task)
        if task not in self.baseline_results:
            if task in self.baselines:
                raise MissingArtifact(f"baseline for task {task} was loaded, not trained; no training record")
            model = ModelBundle.create(self.corpus, self.cfg.enc, self.seed)
            self.baseline_results[task] = fit(model, self.corpus, self.split, task, self.regime("baseline"), self.seed)
            self.baselines[task] = self.baseline_results[task].model
        return self.baseline_results[task]

    def baseline_model(self, task: str) -> ModelBundle:
        task = task_key(task)
        if task not in self.baselines:
            self.baseline(task)
        return self.baselines[task]

    def retriever_params(self, regime: str) -> tuple[ParameterStore, dict]:
        if regime not in self.retrievers:
            holder = ModelBundle.create(self.corpus, self.cfg.enc, self.seed)
            r = holder.add_retriever(regime, self.seed)
            held = sample_pairs(self.corpus, list(self.split.validation) + list(self.split.test), 1000,
                                derive_seed(self.seed, "heldout-pairs"))
            hist = train_retriever(r, self.corpus, self.split.train, self.cfg.retriever_train,
                                   derive_seed(self.seed, f"retriever/{regime}"), held)
            self.retrievers[regime] = (holder.store.subset([RET]), hist)
        return self.retrievers[regime]

    def prepared(self, task: str, retriever_regime: str = "lor") -> tuple[ModelBundle, ds.DatastoreSnapshot]:
        """Copy of the trained baseline with a trained retriever and a fresh datastore."""
        model = self.baseline_model(task).copy()
        if retriever_regime == "self":
            model.add_retriever("self", self.seed)
        else:
            params, _ = self.retriever_params(retriever_regime)
            model.attach_retriever_params(retriever_regime, params)
        snap = ds.build(self.corpus, list(self.split.train), model.retriever, task)
        return model, snap

    def run(self, name: str, task: str, record_steps: bool = False, snapshot: ds.DatastoreSnapshot | None = None,
            sweep_grids: tuple | None = None, **kw) -> RegimeResult:
        regime = self.regime(name, **kw)
        if name == "baseline":
            return self.baseline(task)
        model, snap = self.prepared(task, regime.retriever_regime)
        if snapshot is not None:
            if snapshot.dim != model.retriever.dim:
                raise ds.DimensionError(f"store dimension {snapshot.dim} != retriever dimension {model.retriever.dim}")
            snap = snapshot
        if name == "inference-only":
            grids = sweep_grids or (DEFAULT_KS, DEFAULT_LAMBDAS, DEFAULT_TAUS)
            return run_inference_only(model, self.corpus, self.split, task, self.seed, snap, *grids)
        model.add_fusion(FusionConfig(regime.fusion_variant, regime.fusion_layers), self.seed)
        return fit(model, self.corpus, self.split, task, regime, self.seed, snap, record_steps)


def regime_to_dict(regime: TrainingRegime) -> dict:
    return asdict(regime)
