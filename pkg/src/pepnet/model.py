"""PEPNet and the SharedBottom / MMoE baselines over one shared embedding store.

Feature fields are grouped by side. The general embedding ``E`` concatenates
every non-domain field in declaration order; the EPNet gate additionally sees
the domain-side fields; the PPNet gates see the user/item/author fields
(``O_prior``). Baselines get no gates, so they take the domain-side fields as
plain inputs next to ``E``.

Parameter names follow ``tower{t}.W{l}``, ``ep.W`` / ``pp{l}.W2`` and so on;
every array lives in :attr:`PepNetModel.params`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .datagen import FieldSpec, GenConfig, Log, as_log, default_fields
from .gates import (DEFAULT_GAMMA, GATE_INPUT_MODES, EpNetParams, GateNUParams, PpNetParams,
                    epnet_forward, ppnet_layer_forward, xavier_uniform)
from .numerics import Node
from .store import EmbeddingStore, FeatureKey, StoreConfig, init_vector

VARIANTS = ("PEPNET", "PEPNET_NO_EP", "PEPNET_NO_PP", "SHARED_BOTTOM", "MMOE")
GENERAL_SIDES = ("user", "item", "author", "context")
PRIOR_SIDES = ("user", "item", "author")


@dataclass
class ModelConfig:
    num_tasks: int = 6
    num_domains: int = 3
    embedding_dim: int = 40
    fields: list[FieldSpec] = field(default_factory=lambda: default_fields(GenConfig()))
    layers: list[int] = field(default_factory=lambda: [100, 64])
    gamma: float = DEFAULT_GAMMA
    variant: str = "PEPNET"
    mmoe_experts: int = 4
    gate_hidden: int | None = None
    gate_input: str = "stop_gradient"
    epnet_vector_wise: bool = False
    store_capacity: int = 1_000_000
    store_memory_budget: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.fields = [f if isinstance(f, FieldSpec) else FieldSpec(**f) for f in self.fields]
        self.layers = [int(w) for w in self.layers]
        if self.num_tasks < 1 or self.num_domains < 1:
            raise ValueError("num_tasks and num_domains must be >= 1")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if not self.layers or any(w < 1 for w in self.layers):
            raise ValueError(f"layer widths must be positive, got {self.layers}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.gate_input not in GATE_INPUT_MODES:
            raise ValueError(f"unknown gate input mode {self.gate_input!r}")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.mmoe_experts < 1:
            raise ValueError("mmoe_experts must be >= 1")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValueError("duplicate field names")

    def side_fields(self, sides: Sequence[str]) -> list[int]:
        return [i for i, f in enumerate(self.fields) if f.side in sides]

    @property
    def general_fields(self) -> list[int]:
        return self.side_fields(GENERAL_SIDES)

    @property
    def domain_fields(self) -> list[int]:
        return self.side_fields(("domain",))

    @property
    def prior_fields(self) -> list[int]:
        return self.side_fields(PRIOR_SIDES)

    @property
    def uses_epnet(self) -> bool:
        return self.variant in ("PEPNET", "PEPNET_NO_PP")

    @property
    def uses_ppnet(self) -> bool:
        return self.variant in ("PEPNET", "PEPNET_NO_EP")

    @property
    def is_pepnet(self) -> bool:
        return self.variant.startswith("PEPNET")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form count of dense (non-embedding) parameters.

    With ``e`` the general embedding width, ``k`` the domain-side width, ``p``
    the prior width, ``w_0..w_L`` the tower widths (input, hidden..., 1) and
    ``T`` tasks:

    * PEPNet towers: ``T * sum_l (w_l w_{l+1} + w_{l+1})``
    * EPNet gate (in ``k+e``, hidden ``h``, out ``e`` or #fields): ``(k+e)h + h + h*out + out``
    * PPNet gate per layer ``l`` (in ``p+e``, out ``w_l T``): same two-layer formula
    * SharedBottom: shared MLP over ``layers[:-1]`` then per-task MLP over ``layers[-1:]`` and head
    * MMoE: ``K`` experts over ``layers[:-1]``, per-task softmax gate ``(e+k)K + K``, per-task towers
    """
    d = cfg.embedding_dim
    e = d * len(cfg.general_fields)
    k = d * len(cfg.domain_fields)
    p = d * len(cfg.prior_fields)
    T = cfg.num_tasks

    def mlp(widths):
        return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))

    def gate(i, o):
        h = o if cfg.gate_hidden is None else cfg.gate_hidden
        return i * h + h + h * o + o

    if cfg.is_pepnet:
        widths = [e] + cfg.layers + [1]
        total = T * mlp(widths)
        gin = 0 if cfg.gate_input == "none" else e
        if cfg.uses_epnet:
            total += gate(k + gin, len(cfg.general_fields) if cfg.epnet_vector_wise else e)
        if cfg.uses_ppnet:
            total += sum(gate(p + gin, w * T) for w in widths[:-1])
        return total
    x = e + k
    trunk, tower = cfg.layers[:-1], cfg.layers[-1:]
    last = trunk[-1] if trunk else x
    towers = T * mlp([last] + tower + [1])
    if cfg.variant == "SHARED_BOTTOM":
        return mlp([x] + trunk) + towers
    experts = cfg.mmoe_experts * mlp([x] + trunk)
    return experts + T * (x * cfg.mmoe_experts + cfg.mmoe_experts) + towers


@dataclass
class ForwardResult:
    scores: Node                      # [batch, T]
    leaves: dict[str, Node]
    emb_leaves: dict[int, Node]       # field index -> [batch, dim]
    emb_slots: dict[int, np.ndarray]
    extras: dict[str, Node] = field(default_factory=dict)


class PepNetModel:
    def __init__(self, config: ModelConfig, store: EmbeddingStore | None = None):
        self.config = config
        self.store = store or EmbeddingStore(StoreConfig(
            dim=config.embedding_dim, capacity=config.store_capacity,
            memory_budget=config.store_memory_budget, seed=config.seed))
        self.params: dict[str, np.ndarray] = {}
        self.update_tags: dict[str, set[str]] = {}
        self._init_params(np.random.default_rng([config.seed, 1]))

    # -- construction --------------------------------------------------------

    def _dense(self, rng, prefix: str, fan_in: int, fan_out: int) -> None:
        self.params[f"{prefix}.W"] = xavier_uniform(rng, fan_in, fan_out)
        self.params[f"{prefix}.b"] = np.zeros(fan_out)

    def _gate(self, rng, prefix: str, fan_in: int, fan_out: int) -> None:
        g = GateNUParams.init(rng, fan_in, fan_out, self.config.gate_hidden, self.config.gamma)
        for k, v in g.arrays().items():
            self.params[f"{prefix}.{k}"] = v

    def _init_params(self, rng) -> None:
        cfg = self.config
        d, T = cfg.embedding_dim, cfg.num_tasks
        e, k, p = (d * len(cfg.general_fields), d * len(cfg.domain_fields), d * len(cfg.prior_fields))
        gin = 0 if cfg.gate_input == "none" else e
        if cfg.is_pepnet:
            widths = [e] + cfg.layers + [1]
            for t in range(T):
                for l, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
                    self._dense(rng, f"tower{t}.{l}", a, b)
            if cfg.uses_epnet:
                out = len(cfg.general_fields) if cfg.epnet_vector_wise else e
                self._gate(rng, "ep", k + gin, out)
            if cfg.uses_ppnet:
                for l, w in enumerate(widths[:-1]):
                    self._gate(rng, f"pp{l}", p + gin, w * T)
            return
        x = e + k
        trunk, tower = cfg.layers[:-1], cfg.layers[-1:]
        if cfg.variant == "SHARED_BOTTOM":
            for l, (a, b) in enumerate(zip([x] + trunk[:-1], trunk)):
                self._dense(rng, f"bottom.{l}", a, b)
        else:
            for j in range(cfg.mmoe_experts):
                for l, (a, b) in enumerate(zip([x] + trunk[:-1], trunk)):
                    self._dense(rng, f"expert{j}.{l}", a, b)
            for t in range(T):
                self._dense(rng, f"mmoe_gate{t}", x, cfg.mmoe_experts)
        last = trunk[-1] if trunk else x
        for t in range(T):
            for l, (a, b) in enumerate(zip([last] + tower, tower + [1])):
                self._dense(rng, f"tower{t}.{l}", a, b)

    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def gate_params(self, prefix: str) -> GateNUParams:
        pp = self.params
        return GateNUParams(pp[f"{prefix}.W"], pp[f"{prefix}.b"], pp[f"{prefix}.W2"], pp[f"{prefix}.b2"],
                            self.config.gamma)

    def zero_gate_outputs(self) -> None:
        """Reset every gate's second layer so all gates output gamma / 2."""
        for name, arr in self.params.items():
            if name.endswith(".W2") or name.endswith(".b2"):
                arr[...] = 0.0

    # -- embeddings --------------------------------------------------------------

    def embed_example(self, batch, pass_index: int | None = None, train: bool = False):
        """Returns ``(E, domain_emb, O_prior)`` and the per-field leaves/slots.

        ``train=True`` admits unseen keys into the store and counts touches;
        otherwise the store is only read and unseen keys get their
        deterministic initial vector.
        """
        cfg = self.config
        log = as_log(batch, [f.name for f in cfg.fields], cfg.num_tasks)
        if len(log) == 0:
            raise ValueError("empty batch")
        for f in cfg.fields:
            if f.name not in log.features:
                raise KeyError(f"batch has no feature field {f.name!r}")
        leaves: dict[int, Node] = {}
        slots: dict[int, np.ndarray] = {}
        if train:
            req = [(i, log.features[f.name]) for i, f in enumerate(cfg.fields)]
            for (i, _), s in zip(req, self.store.lookup_slots(req, pass_index)):
                slots[i] = s
                leaves[i] = nx.parameter(self.store.vectors[s], name=f"emb.{cfg.fields[i].name}")
        else:
            for i, f in enumerate(cfg.fields):
                leaves[i] = nx.constant(self._peek(i, log.features[f.name]))

        def cat(idx):
            return nx.concat([leaves[i] for i in idx]) if idx else None

        return (cat(cfg.general_fields), cat(cfg.domain_fields), cat(cfg.prior_fields)), leaves, slots

    def _peek(self, field_index: int, values: np.ndarray) -> np.ndarray:
        store = self.store
        uniq, inverse = np.unique(np.asarray(values, dtype=np.uint64), return_inverse=True)
        rows = np.empty((len(uniq), store.dim))
        for j, v in enumerate(uniq.tolist()):
            s = store._slots.get((field_index, v))
            rows[j] = store.vectors[s] if s is not None else init_vector(store.config.seed, FeatureKey(field_index, v), store.dim)
        return rows[inverse]

    # -- forward -------------------------------------------------------------------

    def forward(self, batch, pass_index: int | None = None, train: bool = False,
                use_ep: bool | None = None, use_pp: bool | None = None) -> ForwardResult:
        """Scores in (0, 1) with shape ``[batch, T]``.

        ``use_ep`` / ``use_pp`` override the variant's gate switches on a
        PEPNet model; both False gives the ungated tower network with the very
        same tower and embedding parameters.
        """
        cfg = self.config
        (E, dom, prior), emb_leaves, slots = self.embed_example(batch, pass_index, train)
        leaves = {k: (nx.parameter(v, name=k) if train else nx.constant(v)) for k, v in self.params.items()}
        extras: dict[str, Node] = {}
        if cfg.is_pepnet:
            ep = cfg.uses_epnet if use_ep is None else use_ep
            pp = cfg.uses_ppnet if use_pp is None else use_pp
            if (ep and "ep.W" not in self.params) or (pp and "pp0.W" not in self.params):
                raise ValueError(f"variant {cfg.variant} has no parameters for the requested gates")
            scores = self._forward_pepnet(E, dom, prior, leaves, ep, pp, extras)
        elif cfg.variant == "SHARED_BOTTOM":
            scores = self._forward_shared_bottom(nx.concat([E, dom]), leaves)
        else:
            scores = self._forward_mmoe(nx.concat([E, dom]), leaves, extras)
        return ForwardResult(scores, leaves, emb_leaves, slots, extras)

    def _sub(self, leaves, prefix):
        return {k.split(".")[-1]: leaves[f"{prefix}.{k}"] for k in ("W", "b", "W2", "b2")}

    def _forward_pepnet(self, E, dom, prior, leaves, use_ep, use_pp, extras) -> Node:
        cfg = self.config
        T, L = cfg.num_tasks, len(cfg.layers) + 1
        if use_ep:
            ep = EpNetParams(self.gate_params("ep"),
                             [cfg.embedding_dim] * len(cfg.general_fields) if cfg.epnet_vector_wise else None)
            delta, O_ep = epnet_forward(ep, dom, E, self._sub(leaves, "ep"), cfg.gate_input)
            extras["delta_domain"] = delta
        else:
            O_ep = E
        extras["O_ep"] = O_ep
        H = [O_ep] * T
        for l in range(L):
            if use_pp:
                H = ppnet_layer_forward(self.gate_params(f"pp{l}"), prior, O_ep, H,
                                        self._sub(leaves, f"pp{l}"), cfg.gate_input)
            act = nx.sigmoid if l == L - 1 else nx.relu
            H = [act(nx.linear(h, leaves[f"tower{t}.{l}.W"], leaves[f"tower{t}.{l}.b"])) for t, h in enumerate(H)]
        return nx.concat(H)

    def _towers(self, x: Node, leaves) -> Node:
        cfg = self.config
        n = len(cfg.layers[-1:]) + 1
        outs = []
        for t in range(cfg.num_tasks):
            h = x
            for l in range(n):
                act = nx.sigmoid if l == n - 1 else nx.relu
                h = act(nx.linear(h, leaves[f"tower{t}.{l}.W"], leaves[f"tower{t}.{l}.b"]))
            outs.append(h)
        return nx.concat(outs)

    def _mlp(self, x: Node, leaves, prefix: str, depth: int) -> Node:
        for l in range(depth):
            x = nx.relu(nx.linear(x, leaves[f"{prefix}.{l}.W"], leaves[f"{prefix}.{l}.b"]))
        return x

    def _forward_shared_bottom(self, x: Node, leaves) -> Node:
        return self._towers(self._mlp(x, leaves, "bottom", len(self.config.layers) - 1), leaves)

    def _forward_mmoe(self, x: Node, leaves, extras) -> Node:
        cfg = self.config
        depth = len(cfg.layers) - 1
        experts = [self._mlp(x, leaves, f"expert{j}", depth) for j in range(cfg.mmoe_experts)]
        ones = nx.constant(np.ones((1, experts[0].shape[-1])))
        outs = []
        for t in range(cfg.num_tasks):
            g = nx.softmax(nx.linear(x, leaves[f"mmoe_gate{t}.W"], leaves[f"mmoe_gate{t}.b"]))
            extras[f"mmoe_gate{t}"] = g
            cols = nx.split(g, [1] * cfg.mmoe_experts)
            mix = None
            for c, ex in zip(cols, experts):
                term = nx.mul(nx.matmul(c, ones), ex)
                mix = term if mix is None else nx.add(mix, term)
            h = mix
            n = len(cfg.layers[-1:]) + 1
            for l in range(n):
                act = nx.sigmoid if l == n - 1 else nx.relu
                h = act(nx.linear(h, leaves[f"tower{t}.{l}.W"], leaves[f"tower{t}.{l}.b"]))
            outs.append(h)
        return nx.concat(outs)

    def predict(self, batch, chunk: int = 4096) -> np.ndarray:
        """Scores ``[n, T]`` without touching the store."""
        log = as_log(batch, [f.name for f in self.config.fields], self.config.num_tasks)
        parts = [self.forward(log.take(slice(i, i + chunk))).scores.value for i in range(0, len(log), chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, self.config.num_tasks))


# -- checkpoints -----------------------------------------------------------------

_MAGIC = b"PEPNETCK"
_VERSION = 1


def save_checkpoint(path, model: PepNetModel, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Binary container: magic, version, JSON header, then raw little-endian f64 tensors."""
    tensors: dict[str, np.ndarray] = {f"param/{k}": v for k, v in model.params.items()}
    tensors.update({f"store/{k}": v for k, v in model.store.state_arrays().items()})
    tensors.update(extra or {})
    index, offset, blobs = [], 0, []
    for name in tensors:
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"config": model.config.to_dict(), "store_config": asdict(model.store.config),
                         "meta": meta or {}, "tensors": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<IQ", _VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> tuple[PepNetModel, dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != _MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(blob[start:start + hlen])
    base = start + hlen
    tensors = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        lo = base + t["offset"]
        tensors[t["name"]] = np.frombuffer(blob[lo:lo + 8 * n], dtype="<f8").astype(np.float64).reshape(t["shape"])
    config = ModelConfig.from_dict(header["config"])
    store = EmbeddingStore.from_state(StoreConfig(**header["store_config"]),
                                      {k[6:]: v for k, v in tensors.items() if k.startswith("store/")})
    model = PepNetModel(config, store)
    for k in list(model.params):
        model.params[k] = tensors[f"param/{k}"].copy()
    extra = {k: v for k, v in tensors.items() if not k.startswith(("param/", "store/"))}
    return model, extra, header["meta"]
