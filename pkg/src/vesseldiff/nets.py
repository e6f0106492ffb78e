"""The two denoiser networks.

Node denoiser: per-block coordinate MLP + timestep MLP summed, then masked
multi-head self-attention; a final MLP projects back to 3 coordinates.

Edge denoiser: a graph transformer that is deliberately *not* rotation
invariant (raw coordinates feed the node features so dataset orientation is
learnable). Pair features come from the noisy edge one-hots plus pairwise
distance, modulate node features through FiLM together with the timestep,
and bias the attention logits. The final head scores node-feature pairs and
symmetrizes the logits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import (Tape, Tensor, add, concat, expand, gelu, layer_norm,
                       matmul, mul, reshape, scaled_dot_attention, slice_axis,
                       transpose, tsum)

MASK_NEG = -1e9


class ParamStore:
    """Flat name -> float64 array mapping, the unit of checkpointing."""

    def __init__(self):
        self.arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, shape: tuple, rng: Optional[np.random.Generator],
            kind: str = "weight") -> None:
        if name in self.arrays:
            raise ValueError(f"duplicate parameter {name}")
        if kind == "weight":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            self.arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)
        elif kind == "zeros":
            self.arrays[name] = np.zeros(shape)
        elif kind == "ones":
            self.arrays[name] = np.ones(shape)
        else:
            raise ValueError(f"unknown init kind {kind}")

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def bind(self, tape: Optional[Tape]) -> dict[str, Tensor]:
        """Tensor views of every parameter; leaves when a tape is given."""
        if tape is None:
            return {k: Tensor(v) for k, v in self.arrays.items()}
        return {k: tape.leaf(v) for k, v in self.arrays.items()}


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer steps; period range 2*pi .. 2*pi*1e4."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    if half < 1:
        raise ValueError(f"time embedding dim must be >= 2, got {dim}")
    exponents = np.arange(half) / max(half - 1, 1)
    freqs = 10.0 ** (-4.0 * exponents)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _linear(p: dict, name: str, x: Tensor) -> Tensor:
    return add(matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def _mlp(p: dict, name: str, x: Tensor) -> Tensor:
    h = gelu(add(matmul(x, p[f"{name}.w0"]), p[f"{name}.b0"]))
    return add(matmul(h, p[f"{name}.w1"]), p[f"{name}.b1"])


def _add_linear(store: ParamStore, name: str, d_in: int, d_out: int, rng) -> None:
    store.add(f"{name}.w", (d_in, d_out), rng)
    store.add(f"{name}.b", (d_out,), None, kind="zeros")


def _add_mlp(store: ParamStore, name: str, d_in: int, d_hidden: int, d_out: int,
             rng, zero_out: bool = False) -> None:
    store.add(f"{name}.w0", (d_in, d_hidden), rng)
    store.add(f"{name}.b0", (d_hidden,), None, kind="zeros")
    if zero_out:
        store.add(f"{name}.w1", (d_hidden, d_out), None, kind="zeros")
    else:
        store.add(f"{name}.w1", (d_hidden, d_out), rng)
    store.add(f"{name}.b1", (d_out,), None, kind="zeros")


def _add_ln(store: ParamStore, name: str, dim: int) -> None:
    store.add(f"{name}.g", (dim,), None, kind="ones")
    store.add(f"{name}.b", (dim,), None, kind="zeros")


def _add_attn(store: ParamStore, name: str, dim: int, rng) -> None:
    for part in ("q", "k", "v", "o"):
        _add_linear(store, f"{name}.w{part}", dim, dim, rng)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, d = x.shape
    return transpose(reshape(x, (b, n, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, n, dh = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, n, h * dh))


def _self_attention(p: dict, name: str, x: Tensor, heads: int,
                    bias: Optional[Tensor]) -> Tensor:
    q = _split_heads(_linear(p, f"{name}.wq", x), heads)
    k = _split_heads(_linear(p, f"{name}.wk", x), heads)
    v = _split_heads(_linear(p, f"{name}.wv", x), heads)
    out = scaled_dot_attention(q, k, v, bias=bias)
    return _linear(p, f"{name}.wo", _merge_heads(out))


def _key_mask_bias(mask: np.ndarray, heads: int) -> Tensor:
    """(B, heads, n, n) additive bias hiding masked keys."""
    b, n = mask.shape
    kb = np.where(mask[:, None, None, :] > 0.5, 0.0, MASK_NEG)
    return Tensor(np.broadcast_to(kb, (b, heads, n, n)).copy())


@dataclass(frozen=True)
class NodeNetConfig:
    hidden: int = 256
    blocks: int = 2
    heads: int = 4
    time_dim: int = 256

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")

    def to_json(self) -> dict:
        return {"hidden": self.hidden, "blocks": self.blocks,
                "heads": self.heads, "time_dim": self.time_dim}


class NodeDenoiser:
    """Predicts the Gaussian noise added to a batch of node coordinates."""

    def __init__(self, cfg: NodeNetConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store

    @staticmethod
    def create(cfg: NodeNetConfig, rng: np.random.Generator) -> "NodeDenoiser":
        s = ParamStore()
        h = cfg.hidden
        _add_linear(s, "node_net.lift", 3, h, rng)
        for i in range(cfg.blocks):
            pre = f"node_net.block{i}"
            _add_mlp(s, f"{pre}.coord_mlp", h, h, h, rng)
            _add_mlp(s, f"{pre}.time_mlp", cfg.time_dim, h, h, rng)
            _add_ln(s, f"{pre}.ln", h)
            _add_attn(s, f"{pre}.attn", h, rng)
        _add_mlp(s, "node_net.head", h, h, 3, rng)
        return NodeDenoiser(cfg, s)

    def forward(self, p: dict, x_t: np.ndarray, t: np.ndarray,
                mask: np.ndarray) -> Tensor:
        """x_t: (B, n, 3) noisy coords, t: (B,) steps, mask: (B, n) in {0,1}."""
        b, n, _ = x_t.shape
        m3 = Tensor(np.broadcast_to(mask[:, :, None], (b, n, 3)).astype(np.float64))
        x_in = mul(Tensor(x_t), m3)
        emb = Tensor(time_embedding(t, self.cfg.time_dim))
        kbias = _key_mask_bias(mask, self.cfg.heads)
        h = _linear(p, "node_net.lift", x_in)
        for i in range(self.cfg.blocks):
            pre = f"node_net.block{i}"
            u = _mlp(p, f"{pre}.coord_mlp", h)
            v = _mlp(p, f"{pre}.time_mlp", emb)
            s = add(u, expand(reshape(v, (b, 1, self.cfg.hidden)),
                              (b, n, self.cfg.hidden)))
            s_ln = layer_norm(s, p[f"{pre}.ln.g"], p[f"{pre}.ln.b"])
            h = add(s, _self_attention(p, f"{pre}.attn", s_ln, self.cfg.heads, kbias))
        out = _mlp(p, "node_net.head", h)
        return mul(out, m3)

    def predict(self, x_t: np.ndarray, t: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return self.forward(self.store.bind(None), x_t, t, mask).data


@dataclass(frozen=True)
class EdgeNetConfig:
    num_classes: int
    node_dim: int = 128
    edge_dim: int = 64
    blocks: int = 8
    heads: int = 8
    time_dim: int = 128
    film_hidden: int = 128
    mlp_hidden: int = 256
    head_hidden: int = 128
    dropout: float = 0.0

    def __post_init__(self):
        if self.node_dim % self.heads:
            raise ValueError(f"node_dim {self.node_dim} not divisible by heads {self.heads}")
        if self.num_classes < 2:
            raise ValueError("need num_classes >= 2")

    def to_json(self) -> dict:
        return {"num_classes": self.num_classes, "node_dim": self.node_dim,
                "edge_dim": self.edge_dim, "blocks": self.blocks,
                "heads": self.heads, "time_dim": self.time_dim,
                "film_hidden": self.film_hidden, "mlp_hidden": self.mlp_hidden,
                "head_hidden": self.head_hidden, "dropout": self.dropout}


def pair_mask(mask: np.ndarray) -> np.ndarray:
    """(B, n, n) validity: both endpoints unmasked and i != j."""
    m = mask.astype(bool)
    pm = m[:, :, None] & m[:, None, :]
    pm &= ~np.eye(mask.shape[1], dtype=bool)[None]
    return pm.astype(np.float64)


class EdgeDenoiser:
    """Predicts clean edge-class logits from noisy edges and fixed coordinates."""

    def __init__(self, cfg: EdgeNetConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store

    @staticmethod
    def create(cfg: EdgeNetConfig, rng: np.random.Generator) -> "EdgeDenoiser":
        s = ParamStore()
        dn, de = cfg.node_dim, cfg.edge_dim
        _add_linear(s, "edge_net.node_lift", 3, dn, rng)
        # pair lift input: class one-hot + displacement vector + its norm
        _add_linear(s, "edge_net.pair_lift", cfg.num_classes + 4, de, rng)
        for i in range(cfg.blocks):
            pre = f"edge_net.block{i}"
            # Zero-initialized FiLM output: every block starts as an identity
            # modulation, which keeps the residual stream stable early on.
            _add_mlp(s, f"{pre}.film", de + cfg.time_dim, cfg.film_hidden,
                     2 * dn, rng, zero_out=True)
            _add_ln(s, f"{pre}.ln1", dn)
            _add_attn(s, f"{pre}.attn", dn, rng)
            _add_linear(s, f"{pre}.bias", de, cfg.heads, rng)
            _add_ln(s, f"{pre}.ln2", dn)
            _add_mlp(s, f"{pre}.mlp", dn, cfg.mlp_hidden, dn, rng)
        _add_mlp(s, "edge_net.head", 2 * dn + de, cfg.head_hidden, cfg.num_classes, rng)
        return EdgeDenoiser(cfg, s)

    def forward(self, p: dict, e_t: np.ndarray, coords: np.ndarray,
                t: np.ndarray, mask: np.ndarray,
                dropout_rng: Optional[np.random.Generator] = None) -> Tensor:
        """e_t: (B, n, n, c) one-hot noisy edges, coords: (B, n, 3) clean,
        t: (B,), mask: (B, n). Returns symmetric logits (B, n, n, c).
        Passing dropout_rng enables (inverted) dropout on the residual
        branches; inference leaves it None."""
        cfg = self.cfg
        b, n = mask.shape

        def drop(x: Tensor) -> Tensor:
            if dropout_rng is None or cfg.dropout <= 0.0:
                return x
            keep = 1.0 - cfg.dropout
            m = (dropout_rng.random(x.shape) < keep) / keep
            return mul(x, Tensor(m))
        m3 = Tensor(np.broadcast_to(mask[:, :, None], (b, n, 3)).astype(np.float64))
        pm = pair_mask(mask)
        pm4 = Tensor(np.broadcast_to(pm[..., None], (b, n, n, cfg.edge_dim)).copy())

        # Relative geometry generalizes across point clouds where absolute
        # coordinates cannot; the displacement vector keeps the network
        # orientation-sensitive while being translation invariant.
        diff = coords[:, :, None, :] - coords[:, None, :, :]
        dist = np.sqrt((diff * diff).sum(-1, keepdims=True))
        pair_in = np.concatenate([e_t, diff, dist], axis=-1) * pm[..., None]

        emb = time_embedding(t, cfg.time_dim)
        emb_nodes = Tensor(np.broadcast_to(emb[:, None, :], (b, n, cfg.time_dim)).copy())
        kbias = _key_mask_bias(mask, cfg.heads)
        counts = np.maximum(pm.sum(axis=2, keepdims=True), 1.0)
        inv_counts = Tensor(np.broadcast_to(1.0 / counts, (b, n, cfg.edge_dim)).copy())

        hn = drop(_linear(p, "edge_net.node_lift", mul(Tensor(coords), m3)))
        pe = drop(mul(_linear(p, "edge_net.pair_lift", Tensor(pair_in)), pm4))

        for i in range(cfg.blocks):
            pre = f"edge_net.block{i}"
            agg = mul(tsum(pe, axis=2), inv_counts)
            film = _mlp(p, f"{pre}.film", concat([agg, emb_nodes], axis=-1))
            sc = slice_axis(film, -1, 0, cfg.node_dim)
            sh = slice_axis(film, -1, cfg.node_dim, 2 * cfg.node_dim)
            # FiLM modulates the normalized pre-attention branch; the residual
            # stream itself stays additive so activations cannot compound.
            h_ln = layer_norm(hn, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            h_mod = add(mul(h_ln, add(sc, 1.0)), sh)
            ab = transpose(_linear(p, f"{pre}.bias", pe), (0, 3, 1, 2))
            ha = add(hn, drop(_self_attention(p, f"{pre}.attn", h_mod, cfg.heads,
                                              add(ab, kbias))))
            a_ln = layer_norm(ha, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            hn = add(ha, drop(_mlp(p, f"{pre}.mlp", a_ln)))

        hi = expand(reshape(hn, (b, n, 1, cfg.node_dim)), (b, n, n, cfg.node_dim))
        hj = expand(reshape(hn, (b, 1, n, cfg.node_dim)), (b, n, n, cfg.node_dim))
        logits = _mlp(p, "edge_net.head", concat([hi, hj, pe], axis=-1))
        return mul(add(logits, transpose(logits, (0, 2, 1, 3))), 0.5)

    def predict_logits(self, e_t: np.ndarray, coords: np.ndarray, t: np.ndarray,
                       mask: np.ndarray) -> np.ndarray:
        return self.forward(self.store.bind(None), e_t, coords, t, mask).data
