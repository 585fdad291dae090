"""Metadata-conditioned mixed-type diffusion network.

Every feature of a row becomes one element of the transformer sequence:

    h_j = value_embedding_j + g_r(description) + g_s(feature name) + g_t(t) [+ mask]

where the value embedding comes from ``g_in`` (numerical scalars) or ``g_ic``
(noisy category embeddings). The encoder has no positional signal, so the
network is equivariant to column order. Numerical outputs go through ``g_on``
to a clean-value estimate; categorical outputs go through ``g_oc`` to a vector
that is scored against the ``g_f``-normalized category embeddings.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import diffusion
from .data import DatasetBundle, FeatureSchema
from .errors import ConfigError, DataError
from .nn import MLP, ParameterStore, Tensor, TransformerConfig, TransformerEncoder, ops
from .nn.layers import truncated_normal

CHECKPOINT_MAGIC = b"LTBL"
CHECKPOINT_VERSION = 1
CONDITIONING = ("g_r", "g_s", "g_t")


@dataclass(frozen=True)
class ModelConfig:
    d_h: int = 1024
    d_f: int = 1024
    n_layers: int = 10
    n_heads: int = 8
    mlp_ratio: float = 4.0
    T_train: int = 1000
    T_infer: int = 200
    schedule: str = "linear"
    seed: int = 0

    def __post_init__(self):
        self.transformer_config()
        if self.d_f < 1:
            raise ConfigError("d_f must be positive")
        if not 1 <= self.T_infer <= self.T_train:
            raise ConfigError(f"need 1 <= T_infer <= T_train, got {self.T_infer}, {self.T_train}")

    def transformer_config(self):
        return TransformerConfig(self.n_layers, self.d_h, self.n_heads, self.mlp_ratio, "none")

    @classmethod
    def from_dict(cls, obj):
        known = {k: obj[k] for k in cls.__dataclass_fields__ if k in obj}
        return cls(**known)


@dataclass(frozen=True, eq=False)
class TableContext:
    """Cached text embeddings and statistics needed to model one table schema."""

    features: tuple[FeatureSchema, ...]
    description: np.ndarray  # (d_f,)
    names: np.ndarray  # (d_k, d_f)
    categories: tuple  # per feature: (n_j, d_f) array, or None for numericals
    id: str = ""

    @property
    def n_features(self):
        return len(self.features)

    @property
    def num_idx(self):
        return [j for j, f in enumerate(self.features) if not f.is_categorical]

    @property
    def cat_idx(self):
        return [j for j, f in enumerate(self.features) if f.is_categorical]

    def permute(self, perm):
        perm = list(perm)
        return replace(
            self,
            features=tuple(self.features[i] for i in perm),
            names=self.names[perm],
            categories=tuple(self.categories[i] for i in perm),
        )


def build_context(features, description, embedder, id="") -> TableContext:
    from .embedding import build_category_matrix

    features = tuple(features)
    if not features:
        raise DataError("a table needs at least one feature")
    desc = embedder.embed(description) if description else np.zeros(embedder.dim, dtype=np.float32)
    names = embedder.embed_many(f.name for f in features)
    cats = tuple(build_category_matrix(f, embedder) if f.is_categorical else None for f in features)
    return TableContext(features, desc, names, cats, id)


def context_for(bundle: DatasetBundle, embedder) -> TableContext:
    return build_context(bundle.features, bundle.description, embedder, bundle.id)


@dataclass(eq=False)
class RowBatch:
    """Rows from one table, normalized; categorical targets are category codes."""

    ctx: TableContext
    num: np.ndarray  # (B, n_numerical)
    cat: np.ndarray  # (B, n_categorical) int
    missing: np.ndarray  # (B, d_k) bool
    weight: float = 1.0

    @property
    def size(self):
        return self.missing.shape[0]


def make_batch(bundle: DatasetBundle, ctx: TableContext, rows=None, weight=1.0) -> RowBatch:
    if not bundle.normalized and any(not f.is_categorical for f in bundle.features):
        raise DataError(f"dataset {bundle.id!r} must be normalized before batching")
    rows = np.arange(bundle.n_rows) if rows is None else np.asarray(rows, dtype=np.intp)
    num = np.stack([bundle.columns[j][rows] for j in ctx.num_idx], axis=1) if ctx.num_idx else np.zeros((len(rows), 0))
    cat = (
        np.stack([bundle.columns[j][rows] for j in ctx.cat_idx], axis=1).astype(np.int64)
        if ctx.cat_idx
        else np.zeros((len(rows), 0), dtype=np.int64)
    )
    return RowBatch(ctx, num, cat, bundle.missing[rows], weight)


@dataclass(eq=False)
class Predictions:
    num: Tensor | None  # (B, n_numerical) clean-value estimates
    cat_vectors: Tensor | None  # (B, n_categorical, d_f)
    cat_logprobs: list = field(default_factory=list)  # per categorical feature: (B, n_j)
    cat_embeddings: list = field(default_factory=list)  # per categorical feature: g_f(C), (n_j, d_f)

    def probabilities(self, k):
        return np.exp(self.cat_logprobs[k].data)


class LaTable:
    def __init__(self, config: ModelConfig, store: ParameterStore | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d_h, d_f = config.d_h, config.d_f
        own = ParameterStore(np.float32)
        # conditioning
        self.g_r = MLP(own, "g_r", d_f, d_h, d_h, rng)
        self.g_s = MLP(own, "g_s", d_f, d_h, d_h, rng)
        self.g_t = MLP(own, "g_t", d_h, d_h, d_h, rng)
        # category embedding finetuning (followed by L2 normalization)
        self.g_f = MLP(own, "g_f", d_f, d_h, d_f, rng)
        # value input/output maps
        self.g_in = MLP(own, "g_in", 1, d_h, d_h, rng)
        self.g_ic = MLP(own, "g_ic", d_f, d_h, d_h, rng)
        self.transformer = TransformerEncoder(own, "transformer", config.transformer_config(), rng)
        self.g_on = MLP(own, "g_on", d_h, d_h, 1, rng)
        self.g_oc = MLP(own, "g_oc", d_h, d_h, d_f, rng)
        own.add("mask_embedding", truncated_normal(rng, (d_h,)))
        if store is not None:
            if store.names() != own.names():
                raise ConfigError("parameter store does not match the model configuration")
            for name in own:
                if store[name].shape != own[name].shape:
                    raise ConfigError(f"parameter {name!r}: expected {own[name].shape}, got {store[name].shape}")
            own = store
        self.store = own
        self.schedule = diffusion.build_schedule(config.T_train, config.T_infer, config.schedule)

    def astype(self, dtype):
        return LaTable(self.config, self.store.astype(dtype))

    def copy(self):
        return LaTable(self.config, self.store.copy())

    # building blocks

    def finetuned_categories(self, matrix, p=None):
        """g_f: shallow MLP then L2 normalization onto the unit sphere."""
        p = p if p is not None else self.store
        x = Tensor(np.asarray(matrix, dtype=p.dtype))
        return ops.l2_normalize(self.g_f(p, x), axis=-1)

    def category_targets(self, ctx, codes, p=None):
        """Clean categorical lanes: g_f embedding of each row's category, (B, Lc, d_f)."""
        p = p if p is not None else self.store
        lanes = []
        for k, j in enumerate(ctx.cat_idx):
            emb = self.finetuned_categories(ctx.categories[j], p)
            lanes.append(ops.take(emb, codes[:, k], axis=0))
        return ops.stack(lanes, axis=1)

    def fuse_inputs(self, ctx: TableContext, num_t, cat_t, t, missing, p=None, ablate=()):
        """Transformer input sequence (B, d_k, d_h) in schema order."""
        p = p if p is not None else self.store
        unknown = set(ablate) - set(CONDITIONING)
        if unknown:
            raise ConfigError(f"can only ablate {CONDITIONING}, got {sorted(unknown)}")
        dt = p.dtype
        missing = np.asarray(missing, dtype=bool)
        B, L = missing.shape
        if L != ctx.n_features:
            raise DataError(f"batch has {L} features, schema has {ctx.n_features}")
        d_h = self.config.d_h
        parts, order = [], []
        if ctx.num_idx:
            num_t = ops.as_tensor(np.asarray(num_t, dtype=dt) if not isinstance(num_t, Tensor) else num_t)
            if num_t.shape != (B, len(ctx.num_idx)):
                raise DataError(f"numerical lanes: expected {(B, len(ctx.num_idx))}, got {num_t.shape}")
            emb = self.g_in(p, ops.reshape(num_t, (B * len(ctx.num_idx), 1)))
            parts.append(ops.reshape(emb, (B, len(ctx.num_idx), d_h)))
            order += ctx.num_idx
        if ctx.cat_idx:
            cat_t = cat_t if isinstance(cat_t, Tensor) else Tensor(np.asarray(cat_t, dtype=dt))
            if cat_t.shape != (B, len(ctx.cat_idx), self.config.d_f):
                raise DataError(f"categorical lanes: expected {(B, len(ctx.cat_idx), self.config.d_f)}, got {cat_t.shape}")
            parts.append(self.g_ic(p, cat_t))
            order += ctx.cat_idx
        seq = ops.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        seq = ops.take(seq, np.argsort(order), axis=1)
        if "g_r" not in ablate:
            seq = seq + self.g_r(p, Tensor(np.asarray(ctx.description, dtype=dt)[None, :]))
        if "g_s" not in ablate:
            seq = seq + self.g_s(p, Tensor(np.asarray(ctx.names, dtype=dt)))
        if "g_t" not in ablate:
            t = np.broadcast_to(np.asarray(t), (B,))
            feats = Tensor(diffusion.timestep_features(t, d_h).astype(dt))
            seq = seq + ops.reshape(self.g_t(p, feats), (B, 1, d_h))
        if missing.any():
            seq = seq + ops.mul(Tensor(missing[:, :, None].astype(dt)), p["mask_embedding"])
        return seq

    def forward(self, ctx, num_t, cat_t, t, missing, p=None, ablate=()) -> Predictions:
        p = p if p is not None else self.store
        h = self.transformer(p, self.fuse_inputs(ctx, num_t, cat_t, t, missing, p, ablate))
        preds = Predictions(None, None)
        if ctx.num_idx:
            out = self.g_on(p, ops.take(h, ctx.num_idx, axis=1))
            preds.num = ops.reshape(out, out.shape[:2])
        if ctx.cat_idx:
            vectors = self.g_oc(p, ops.take(h, ctx.cat_idx, axis=1))
            preds.cat_vectors = vectors
            for k, j in enumerate(ctx.cat_idx):
                emb = self.finetuned_categories(ctx.categories[j], p)
                preds.cat_embeddings.append(emb)
                preds.cat_logprobs.append(decode_logprobs(vectors[:, k, :], emb))
        return preds

    def predict(self, ctx, num_t, cat_t, t, missing=None, ablate=()):
        """Per-feature numpy outputs in schema order: clean value (B,) or probabilities (B, n_j)."""
        B = np.shape(num_t)[0] if ctx.num_idx else np.shape(cat_t)[0]
        missing = np.zeros((B, ctx.n_features), dtype=bool) if missing is None else missing
        preds = self.forward(ctx, num_t, cat_t, t, missing, p=self.frozen(), ablate=ablate)
        out = [None] * ctx.n_features
        for k, j in enumerate(ctx.num_idx):
            out[j] = preds.num.data[:, k]
        for k, j in enumerate(ctx.cat_idx):
            out[j] = preds.probabilities(k)
        return out

    def frozen(self):
        """Read-only view of the parameters that records no gradient graph."""
        return _FrozenParams(self.store)

    # training objective

    def noised_inputs(self, batch: RowBatch, t, eps_num, eps_cat, p=None):
        """Forward-noise clean lanes; missing lanes carry pure noise."""
        p = p if p is not None else self.store
        dt = p.dtype
        ab = self.schedule.alpha_bar(np.asarray(t)).astype(dt)
        a = np.sqrt(ab)
        s = np.sqrt(1.0 - ab)
        ctx = batch.ctx
        num_t = cat_t = None
        if ctx.num_idx:
            miss = batch.missing[:, ctx.num_idx]
            x0 = np.where(miss, 0.0, batch.num).astype(dt)
            a_n = np.where(miss, 0.0, a[:, None])
            s_n = np.where(miss, 1.0, s[:, None])
            num_t = (a_n * x0 + s_n * np.asarray(eps_num, dtype=dt)).astype(dt)
        if ctx.cat_idx:
            miss = batch.missing[:, ctx.cat_idx]
            x0 = self.category_targets(ctx, np.where(miss, 0, batch.cat), p)
            a_c = Tensor(np.where(miss, 0.0, a[:, None])[:, :, None].astype(dt))
            s_c = np.where(miss, 1.0, s[:, None])[:, :, None].astype(dt)
            cat_t = ops.add(ops.mul(x0, a_c), Tensor(s_c * np.asarray(eps_cat, dtype=dt)))
        return num_t, cat_t

    def training_loss(self, batch: RowBatch, t, eps_num, eps_cat, p=None, weight=None):
        p = p if p is not None else self.store
        num_t, cat_t = self.noised_inputs(batch, t, eps_num, eps_cat, p)
        preds = self.forward(batch.ctx, num_t, cat_t, t, batch.missing, p)
        return loss(batch, preds, batch.weight if weight is None else weight)

    def draw_noise(self, batch: RowBatch, rng):
        B = batch.size
        t = rng.integers(0, self.config.T_train, size=B)
        eps_num = rng.standard_normal((B, len(batch.ctx.num_idx)))
        eps_cat = rng.standard_normal((B, len(batch.ctx.cat_idx), self.config.d_f))
        return t, eps_num, eps_cat


class _FrozenParams:
    def __init__(self, store):
        self.dtype = store.dtype
        self._views = {name: Tensor(t.data) for name, t in store.items()}

    def __getitem__(self, name):
        return self._views[name]


def decode_logprobs(vectors, embeddings):
    """log softmax(g_f(C) c_hat): scores of (B, d_f) vectors against (n, d_f) unit rows."""
    logits = ops.matmul(vectors, ops.transpose(embeddings, (1, 0)))
    return ops.log_softmax(logits, axis=-1)


def decode_categorical(c_hat, normalized_categories):
    """Numpy form of the category decoder for a single vector or a batch."""
    c = np.atleast_2d(np.asarray(c_hat, dtype=np.float64))
    e = np.asarray(normalized_categories, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] == 0:
        raise DataError("category matrix must be a nonempty 2-D array")
    if c.shape[-1] != e.shape[1]:
        raise DataError(f"vector dimension {c.shape[-1]} does not match category dimension {e.shape[1]}")
    logits = c @ e.T
    logits -= logits.max(axis=-1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=-1, keepdims=True)
    return probs[0] if np.ndim(c_hat) == 1 else probs


def loss(batch: RowBatch, preds: Predictions, weight=1.0):
    """Per row: mean over observed features of cross-entropy (categorical, nats)
    and squared error (numerical); then the batch mean scaled by ``weight``."""
    ctx = batch.ctx
    present = ~np.asarray(batch.missing, dtype=bool)
    counts = present.sum(axis=1)
    if np.any(counts == 0):
        rows = np.flatnonzero(counts == 0)[:5].tolist()
        raise DataError(f"every feature is missing in batch row(s) {rows}")
    dt = preds.num.dtype if preds.num is not None else preds.cat_logprobs[0].dtype
    inv = (1.0 / counts).astype(dt)
    terms = []
    if ctx.num_idx:
        mask = present[:, ctx.num_idx].astype(dt)
        target = np.where(mask > 0, batch.num, 0.0).astype(dt)
        err = ops.square(ops.sub(preds.num, Tensor(target)))
        terms.append(ops.sum_(ops.mul(err, Tensor(mask * inv[:, None])), axis=1))
    B = batch.size
    for k, j in enumerate(ctx.cat_idx):
        lp = preds.cat_logprobs[k]
        codes = np.where(present[:, j], batch.cat[:, k], 0)
        picked = ops.getitem(lp, (np.arange(B), codes))
        w = (present[:, j] * inv).astype(dt)
        terms.append(ops.mul(picked, Tensor(-w)))
    total = terms[0]
    for term in terms[1:]:
        total = ops.add(total, term)
    return ops.mul(ops.mean(total), float(weight))


def loss_reference(batch: RowBatch, num_pred, cat_probs, weight=1.0):
    """Plain numpy evaluation of :func:`loss` from predicted values and probabilities."""
    ctx = batch.ctx
    rows = []
    for i in range(batch.size):
        terms = []
        for k, j in enumerate(ctx.num_idx):
            if not batch.missing[i, j]:
                terms.append((float(num_pred[i][k]) - float(batch.num[i, k])) ** 2)
        for k, j in enumerate(ctx.cat_idx):
            if not batch.missing[i, j]:
                terms.append(-np.log(cat_probs[k][i][batch.cat[i, k]]))
        rows.append(sum(terms) / len(terms))
    return weight * float(np.mean(rows))


# sampling

def lane_rng(seed, name):
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return np.random.default_rng([int(seed), int.from_bytes(digest[:8], "little")])


def lane_noise(ctx: TableContext, n, seed, d_f):
    """Initial noise and final-draw uniforms for each feature, keyed by feature name.

    Because each lane's stream depends only on (seed, name), permuting the
    schema permutes the noise with it.
    """
    init, uniforms = [], []
    for f in ctx.features:
        rng = lane_rng(seed, f.name)
        if f.is_categorical:
            init.append(rng.standard_normal((n, d_f)))
        else:
            init.append(rng.standard_normal(n))
        uniforms.append(rng.random(n))
    return init, uniforms


def sample_rows(model: LaTable, ctx: TableContext, n: int, seed: int = 0, argmax=False, batch_size=4096, ablate=()):
    """Generate ``n`` rows with the deterministic DDIM loop.

    Returns a normalized :class:`DatasetBundle`; call ``.denormalized()`` for
    original units (requires statistics on every numerical feature).
    """
    if n <= 0:
        raise DataError(f"number of rows must be positive, got {n}")
    for f in ctx.features:
        if f.is_categorical and ctx.categories[ctx.features.index(f)] is None:
            raise DataError(f"feature {f.name!r} has no category embeddings")
    init, uniforms = lane_noise(ctx, n, seed, model.config.d_f)
    columns = [None] * ctx.n_features
    for lo in range(0, n, batch_size):
        hi = min(n, lo + batch_size)
        chunk = _sample_chunk(model, ctx, [x[lo:hi] for x in init], [u[lo:hi] for u in uniforms], argmax, ablate)
        for j, col in enumerate(chunk):
            columns[j] = col if columns[j] is None else np.concatenate([columns[j], col])
    missing = np.zeros((n, ctx.n_features), dtype=bool)
    return DatasetBundle(ctx.id or "generated", "", ctx.features, tuple(columns), missing, normalized=True)


def _sample_chunk(model, ctx, init, uniforms, argmax, ablate):
    sched = model.schedule
    p = model.frozen()
    dt = p.dtype
    B = len(uniforms[0])
    x_num = np.stack([init[j] for j in ctx.num_idx], axis=1).astype(np.float64) if ctx.num_idx else None
    x_cat = np.stack([init[j] for j in ctx.cat_idx], axis=1).astype(np.float64) if ctx.cat_idx else None
    missing = np.zeros((B, ctx.n_features), dtype=bool)
    probs = []
    for t, t_prev in diffusion.ddim_pairs(sched):
        preds = model.forward(
            ctx,
            None if x_num is None else x_num.astype(dt),
            None if x_cat is None else x_cat.astype(dt),
            np.full(B, t),
            missing,
            p,
            ablate,
        )
        if x_num is not None:
            x_num = diffusion.ddim_step(sched, x_num, preds.num.data.astype(np.float64), t, t_prev)
        if x_cat is not None:
            probs = [preds.probabilities(k).astype(np.float64) for k in range(len(ctx.cat_idx))]
            x0 = np.stack(
                [diffusion.score_interpolation(_renorm(pr), preds.cat_embeddings[k].data.astype(np.float64))
                 for k, pr in enumerate(probs)],
                axis=1,
            )
            x_cat = diffusion.ddim_step(sched, x_cat, x0, t, t_prev)
    columns = [None] * ctx.n_features
    for k, j in enumerate(ctx.num_idx):
        columns[j] = x_num[:, k]
    for k, j in enumerate(ctx.cat_idx):
        pr = _renorm(probs[k])
        if argmax:
            columns[j] = pr.argmax(axis=1).astype(np.int64)
        else:
            cdf = np.cumsum(pr, axis=1)
            draws = (uniforms[j][:, None] >= cdf).sum(axis=1)
            columns[j] = np.minimum(draws, pr.shape[1] - 1).astype(np.int64)
    return columns


def _renorm(p):
    p = np.clip(p, 0.0, None)
    return p / p.sum(axis=-1, keepdims=True)


# checkpoints

def save_checkpoint(model: LaTable, path, extra=None):
    """Write ``LTBL | u32 version | u64 json length | json | f32 LE parameter blob``."""
    manifest, offset, blobs = [], 0, []
    for name, t in model.store.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    meta = {"config": asdict(model.config), "parameters": manifest, "extra": extra or {}}
    header = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    return path


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", raw, 8)
    meta = json.loads(raw[16:16 + hlen].decode("utf-8"))
    blob = raw[16 + hlen:]
    state = {}
    for entry in meta["parameters"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        end = start + 4 * count
        if end > len(blob):
            raise DataError(f"{path}: parameter {entry['name']!r} runs past end of file")
        state[entry["name"]] = np.frombuffer(blob[start:end], dtype="<f4").reshape(entry["shape"])
    return meta, state


def load_checkpoint(path):
    meta, state = read_checkpoint(path)
    config = ModelConfig.from_dict(meta["config"])
    model = LaTable(config)
    if list(state) != model.store.names():
        raise DataError(f"{path}: parameter manifest does not match configuration")
    model.store.load_state_dict(state)
    return model, meta.get("extra", {})
