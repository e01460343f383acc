"""Relational graph-convolution VGAE for multimodal graphs.

Row-vector convention throughout: node features are rows, so a layer computes
``relu(sum_e A_e @ X_e @ W_e)`` with ``A_e`` the normalized channel adjacency.
Parameters live in a flat ``dict[str, ndarray]`` keyed by path-like names;
the same keys are used in checkpoints.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from . import ad
from .ad import Tape, Tensor
from .errors import ConfigError, ShapeError
from .graph import RelationCSR, RelationSpec, channels_for

DECODERS = ("dedicom", "bilinear", "mlp")


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    encoder_dim: int = 32
    latent_hidden: int = 32
    latent_dim: int = 32
    decoder: str = "dedicom"
    mlp_hidden: tuple[int, ...] = (64,)
    mlp_heads: bool = True
    variational: bool = True
    fingerprint_augment: bool = False
    fingerprint_dim: int = 32
    logsigma_clamp: float = 10.0
    # initial value of the learned log-sigma offset; None drops the offset
    logsigma_init: float | None = -3.0
    drug_type: str = "drug"
    share_relation_weights: bool = False
    use_edge_weights: bool = True

    def validate(self) -> None:
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        for name in ("hidden_dim", "encoder_dim", "latent_hidden", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.fingerprint_dim < 0:
            raise ConfigError("fingerprint_dim must be >= 0")
        if any(h < 1 for h in self.mlp_hidden):
            raise ConfigError("mlp_hidden sizes must be >= 1")
        if self.logsigma_clamp <= 0:
            raise ConfigError("logsigma_clamp must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if "mlp_hidden" in kw:
            kw["mlp_hidden"] = tuple(int(h) for h in kw["mlp_hidden"])
        return cls(**kw)


# ---------------------------------------------------------------------------
# Building blocks


def encode(
    csrs: Sequence[RelationCSR],
    features: Mapping[str, Tensor | None],
    weights: Sequence[Mapping[tuple[str, str], Tensor]],
    node_counts: Mapping[str, int],
) -> dict[str, Tensor]:
    """Stacked relational graph convolutions.

    ``weights[l][(relation, direction)]`` transforms the column-side features
    of that channel at layer ``l``.  A ``None`` feature means one-hot, so the
    transformed features are the weight matrix itself.  Node types receiving
    no messages get zero embeddings.
    """
    if not weights:
        raise ConfigError("encoder needs at least one layer")
    tape = next((w.tape for layer_w in weights for w in layer_w.values()), None)
    if tape is None:
        raise ConfigError("encoder has no message channels")
    h = dict(features)
    for layer, layer_w in enumerate(weights):
        acc: dict[str, Tensor] = {}
        out_dim = None
        for csr in csrs:
            w = layer_w.get((csr.relation, csr.direction))
            if w is None:
                raise ConfigError(f"no layer-{layer + 1} weight for relation {csr.relation!r} ({csr.direction})")
            out_dim = w.cols
            x = h.get(csr.col_type)
            if x is None:
                if w.rows != csr.n_cols:
                    raise ShapeError(
                        f"one-hot input for {csr.col_type!r} has {csr.n_cols} nodes but weight has {w.rows} rows"
                    )
                transformed = w
            else:
                transformed = ad.matmul(x, w)
            msg = ad.spmm(csr, transformed)
            acc[csr.row_type] = msg if csr.row_type not in acc else ad.add(acc[csr.row_type], msg)
        if out_dim is None:
            out_dim = next(iter(layer_w.values())).cols
        h = {}
        for t, n in node_counts.items():
            h[t] = ad.relu(acc[t]) if t in acc else tape.const(np.zeros((n, out_dim)))
    return h


def latent_heads(
    h: Tensor,
    mu1: Tensor,
    mu2: Tensor,
    sig1: Tensor | None = None,
    sig2: Tensor | None = None,
    clamp: float = 10.0,
    sig_offset: Tensor | None = None,
):
    """``mu = tanh(h W1) W2`` and the same form for log sigma, clamped.

    ``sig_offset`` is an optional (1, d) row added to log sigma before the
    clamp, so sampling noise can start small.
    """
    mu = ad.matmul(ad.tanh(ad.matmul(h, mu1)), mu2)
    if sig1 is None:
        return mu, None
    logsig = ad.matmul(ad.tanh(ad.matmul(h, sig1)), sig2)
    if sig_offset is not None:
        logsig = ad.add_row(logsig, sig_offset)
    return mu, ad.clip(logsig, -clamp, clamp)


def reparameterize(mu: Tensor, logsig: Tensor | None, eps: np.ndarray | None = None) -> Tensor:
    """``mu + exp(log sigma) * eps``; ``eps=None`` is evaluation mode (returns mu)."""
    if eps is None or logsig is None:
        return mu
    eps = np.asarray(eps)
    if eps.shape != mu.shape or logsig.shape != mu.shape:
        raise ShapeError(f"reparameterize: mu {mu.shape}, log sigma {logsig.shape}, eps {eps.shape}")
    return ad.add(mu, ad.mul(ad.exp(logsig), mu.tape.const(eps)))


def kl_to_standard_normal(mu: Tensor, logsig: Tensor) -> Tensor:
    """Sum over rows and dims of 0.5 (mu^2 + sigma^2 - 1 - 2 log sigma)."""
    if mu.shape != logsig.shape:
        raise ShapeError(f"kl: mu {mu.shape} vs log sigma {logsig.shape}")
    inner = ad.square(mu) + ad.exp(ad.scale(logsig, 2.0)) - ad.scale(logsig, 2.0)
    return ad.scale(ad.add_scalar(ad.sum_all(inner), -float(mu.value.size)), 0.5)


def _pair_index(pairs):
    p = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return p[:, 0], p[:, 1]


def decode_dedicom(z: Tensor, pairs, d_e: Tensor, r: Tensor) -> Tensor:
    """``z_i diag(d_e) R diag(d_e) z_j`` for every pair; returns an (m, 1) column."""
    i, j = _pair_index(pairs)
    left = ad.matmul(ad.mul_row(ad.gather_rows(z, i), d_e), r)
    right = ad.mul_row(ad.gather_rows(z, j), d_e)
    return ad.row_sum(ad.mul(left, right))


def decode_bilinear(za: Tensor, zb: Tensor, pairs, m_e: Tensor) -> Tensor:
    i, j = _pair_index(pairs)
    return ad.row_sum(ad.mul(ad.matmul(ad.gather_rows(za, i), m_e), ad.gather_rows(zb, j)))


def decode_mlp(za: Tensor, zb: Tensor, pairs, layers: Sequence[tuple[Tensor, Tensor]], head: tuple[Tensor, Tensor]) -> Tensor:
    """MLP over ``concat(z_i, z_j)``: relu hidden layers, linear scalar output.

    Order matters; swapping a pair generally changes the score.
    """
    i, j = _pair_index(pairs)
    x = ad.concat_cols([ad.gather_rows(za, i), ad.gather_rows(zb, j)])
    expected = layers[0][0].rows if layers else head[0].rows
    if x.cols != expected:
        raise ShapeError(f"MLP expects {expected} inputs, pair embedding has {x.cols}")
    for w, b in layers:
        x = ad.relu(ad.add_row(ad.matmul(x, w), b))
    return ad.add_row(ad.matmul(x, head[0]), head[1])


def augment_fingerprint(z: Tensor, fingerprints: np.ndarray, w_m: Tensor | None) -> Tensor:
    """Append ``tanh(F W_m)`` to the latent rows; a zero-width ``W_m`` is a no-op."""
    if w_m is None or w_m.cols == 0:
        return z
    fp = np.asarray(fingerprints)
    if fp.shape[0] != z.rows:
        raise ConfigError(f"fingerprint rows ({fp.shape[0]}) do not match drug count ({z.rows})")
    proj = ad.tanh(ad.matmul(z.tape.const(fp), w_m))
    return ad.concat_cols([z, proj])


def link_probability(scores) -> np.ndarray:
    """Elementwise logistic sigmoid, stable for large magnitudes."""
    x = np.asarray(scores, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def glorot(rng: np.random.Generator, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# Full model


@dataclass
class Embeddings:
    mu: dict[str, Tensor]
    logsig: dict[str, Tensor | None]
    z: dict[str, Tensor] = field(default_factory=dict)


class MultimodalVGAE:
    """Parameter layout plus forward pass for one graph schema.

    ``input_dims[t]`` is the feature width of node type ``t`` or ``None`` for
    one-hot features.  ``fingerprint_width`` is required when the config
    asks for decoder-side fingerprint augmentation.
    """

    def __init__(
        self,
        config: ModelConfig,
        node_counts: Mapping[str, int],
        relations: Sequence[RelationSpec],
        input_dims: Mapping[str, int | None] | None = None,
        fingerprint_width: int = 0,
        supervised: Sequence[str] | None = None,
    ):
        config.validate()
        self.config = config
        self.node_counts = dict(node_counts)
        self.relations = {r.name: r for r in relations}
        self.input_dims = {t: (input_dims or {}).get(t) for t in self.node_counts}
        self.fingerprint_width = int(fingerprint_width)
        self.augmented = config.fingerprint_augment and config.fingerprint_dim > 0
        if self.augmented:
            if config.drug_type not in self.node_counts:
                raise ConfigError(f"fingerprint augmentation needs node type {config.drug_type!r}")
            if self.fingerprint_width <= 0:
                raise ConfigError("fingerprint augmentation requested but no fingerprints are available")
        self.channels = [
            (r.name, d) for r in relations if r.message_passing for d in channels_for(r)
        ]
        names = supervised if supervised is not None else [r.name for r in relations if r.supervised]
        self.decoded = [self.relations[n] for n in names]
        self._shapes = self._layout()

    # -- layout -----------------------------------------------------------

    def embed_dim(self, node_type: str) -> int:
        extra = self.config.fingerprint_dim if self.augmented and node_type == self.config.drug_type else 0
        return self.config.latent_dim + extra

    def _shared(self, rel: RelationSpec) -> bool:
        return self.config.share_relation_weights and rel.same_type and rel.src_type == self.config.drug_type

    def encoder_key(self, layer: int, relation: str, direction: str) -> str:
        rel = self.relations[relation]
        group = "__shared__" if self._shared(rel) else relation
        return f"enc{layer}/{group}/{direction}"

    def _col_type(self, relation: str, direction: str) -> str:
        rel = self.relations[relation]
        return rel.src_type if direction == "rev" else rel.dst_type

    def uses_dedicom(self, rel: RelationSpec) -> bool:
        return self.config.decoder == "dedicom" and rel.same_type and rel.src_type == self.config.drug_type

    def _layout(self) -> dict[str, tuple[int, int]]:
        c = self.config
        shapes: dict[str, tuple[int, int]] = {}
        for layer, out_dim in ((1, c.hidden_dim), (2, c.encoder_dim)):
            for rel, direction in self.channels:
                col = self._col_type(rel, direction)
                if layer == 1:
                    in_dim = self.input_dims[col] or self.node_counts[col]
                else:
                    in_dim = c.hidden_dim
                shapes.setdefault(self.encoder_key(layer, rel, direction), (in_dim, out_dim))
        for t in self.node_counts:
            shapes[f"lat/{t}/mu1"] = (c.encoder_dim, c.latent_hidden)
            shapes[f"lat/{t}/mu2"] = (c.latent_hidden, c.latent_dim)
            if c.variational:
                shapes[f"lat/{t}/sig1"] = (c.encoder_dim, c.latent_hidden)
                shapes[f"lat/{t}/sig2"] = (c.latent_hidden, c.latent_dim)
                if c.logsigma_init is not None:
                    shapes[f"lat/{t}/sig_b"] = (1, c.latent_dim)
        if self.augmented:
            shapes["fp/W_m"] = (self.fingerprint_width, c.fingerprint_dim)
        for rel in self.decoded:
            da, db = self.embed_dim(rel.src_type), self.embed_dim(rel.dst_type)
            if c.decoder == "mlp":
                prefix = f"mlp/{rel.src_type}|{rel.dst_type}"
                width = da + db
                for k, hdim in enumerate(c.mlp_hidden):
                    shapes.setdefault(f"{prefix}/W{k}", (width, hdim))
                    shapes.setdefault(f"{prefix}/b{k}", (1, hdim))
                    width = hdim
                head = f"mlp/head/{rel.name}" if c.mlp_heads else f"{prefix}/out"
                shapes.setdefault(f"{head}/W", (width, 1))
                shapes.setdefault(f"{head}/b", (1, 1))
            elif self.uses_dedicom(rel):
                shapes.setdefault("dec/R_half", (da, da))
                shapes[f"dec/D/{rel.name}"] = (1, da)
            else:
                shapes[f"dec/M/{rel.name}"] = (da, db)
        return shapes

    def param_shapes(self) -> dict[str, tuple[int, int]]:
        return dict(self._shapes)

    def init_params(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        """Glorot weights, zero MLP biases.

        Each parameter draws from its own stream keyed by name, so models that
        differ only in optional parameters start from identical shared weights.
        """
        base = int(rng.integers(1 << 62))
        params = {}
        for name, shape in self._shapes.items():
            own = np.random.default_rng([base, zlib.crc32(name.encode("utf-8"))])
            last = name.rsplit("/", 1)[-1]
            if last.startswith("b") and name.startswith("mlp/"):
                params[name] = np.zeros(shape)
            elif last == "sig_b":
                params[name] = np.full(shape, float(self.config.logsigma_init))
            else:
                params[name] = glorot(own, shape)
        return params

    def check_params(self, params: Mapping[str, np.ndarray]) -> None:
        from .errors import DimensionError

        for name, shape in self._shapes.items():
            if name not in params:
                raise DimensionError(f"checkpoint lacks parameter {name!r}")
            if tuple(params[name].shape) != shape:
                raise DimensionError(
                    f"parameter {name!r} has shape {tuple(params[name].shape)}, model expects {shape}"
                )

    # -- forward ----------------------------------------------------------

    def leaves(self, tape: Tape, params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: tape.leaf(params[k], name=k, requires_grad=requires_grad) for k in self._shapes}

    def embed(
        self,
        tape: Tape,
        P: Mapping[str, Tensor],
        csrs: Sequence[RelationCSR],
        features: Mapping[str, np.ndarray | None] | None = None,
        noise: Mapping[str, np.ndarray] | None = None,
        fingerprints: np.ndarray | None = None,
    ) -> Embeddings:
        """Encoder, latent heads, sampling and fingerprint augmentation.

        ``noise=None`` is evaluation mode.
        """
        c = self.config
        feats = {}
        for t in self.node_counts:
            f = None if features is None else features.get(t)
            feats[t] = None if f is None else tape.const(f)
        weights = []
        for layer in (1, 2):
            layer_w = {}
            for csr in csrs:
                key = self.encoder_key(layer, csr.relation, csr.direction) if csr.relation in self.relations else None
                if key not in P:
                    raise ConfigError(f"no layer-{layer} weight for relation {csr.relation!r} ({csr.direction})")
                layer_w[(csr.relation, csr.direction)] = P[key]
            weights.append(layer_w)
        h = encode(csrs, feats, weights, self.node_counts)
        emb = Embeddings({}, {}, {})
        for t in self.node_counts:
            sig = (P[f"lat/{t}/sig1"], P[f"lat/{t}/sig2"]) if c.variational else (None, None)
            off = P.get(f"lat/{t}/sig_b")
            mu, ls = latent_heads(h[t], P[f"lat/{t}/mu1"], P[f"lat/{t}/mu2"], *sig, clamp=c.logsigma_clamp, sig_offset=off)
            emb.mu[t], emb.logsig[t] = mu, ls
            z = reparameterize(mu, ls, None if noise is None else noise.get(t))
            if self.augmented and t == c.drug_type:
                if fingerprints is None:
                    raise ConfigError("model was built with fingerprint augmentation but no fingerprints were given")
                z = augment_fingerprint(z, fingerprints, P["fp/W_m"])
            emb.z[t] = z
        return emb

    def kl_terms(self, emb: Embeddings) -> dict[str, Tensor]:
        if not self.config.variational:
            return {}
        return {t: kl_to_standard_normal(emb.mu[t], emb.logsig[t]) for t in self.node_counts}

    def score(self, P: Mapping[str, Tensor], z: Mapping[str, Tensor], relation: str, pairs) -> Tensor:
        """Raw decoder output (logit or regression value) as an (m, 1) column."""
        rel = self.relations.get(relation)
        if rel is None or rel not in self.decoded:
            raise KeyError(f"relation {relation!r} is not decoded by this model")
        za, zb = z[rel.src_type], z[rel.dst_type]
        if rel.symmetric:
            # undirected edges are stored as (min, max); score them the same way
            pairs = np.sort(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), axis=1)
        c = self.config
        if c.decoder == "mlp":
            prefix = f"mlp/{rel.src_type}|{rel.dst_type}"
            layers = [(P[f"{prefix}/W{k}"], P[f"{prefix}/b{k}"]) for k in range(len(c.mlp_hidden))]
            head = f"mlp/head/{rel.name}" if c.mlp_heads else f"{prefix}/out"
            return decode_mlp(za, zb, pairs, layers, (P[f"{head}/W"], P[f"{head}/b"]))
        if self.uses_dedicom(rel):
            r_half = P["dec/R_half"]
            return decode_dedicom(za, pairs, P[f"dec/D/{rel.name}"], ad.add(r_half, ad.transpose(r_half)))
        return decode_bilinear(za, zb, pairs, P[f"dec/M/{rel.name}"])
