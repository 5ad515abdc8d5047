"""Full classifiers: DAT encoder -> refinement block -> MLP fusion.

``IwdQueenModel`` refines the token with 16 simulated 4-qubit heads;
``IwdTransformerModel`` swaps those for a depthwise-convolution block (CFEB)
of similar size.  Parameters live in a flat ``{name: Tensor}`` dict with
dotted names, which is also the checkpoint layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import dat, qsim
from . import numerics as nx
from .ddm_core import DdmRecord, normalize
from .errors import DataError
from .numerics import Tensor

FORMAT_VERSION = 1
THRESHOLD = 0.5
N_CHANNELS = 16


def _normal(rng, shape, fan_in):
    return Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _mlp_params(rng, n_in: int) -> dict[str, Tensor]:
    return {
        "mlp.w1": _normal(rng, (n_in, 16), n_in),
        "mlp.b1": _zeros((16,)),
        "mlp.w2": _normal(rng, (16, 1), 16),
        "mlp.b2": _zeros((1,)),
    }


def mlp_fuse(features, params, train: bool = False, rng=None, dropout_rate: float = 0.1) -> Tensor:
    """LP -> GELU -> DO -> LP -> sigmoid, returning probabilities of shape ``(B,)``."""
    h = nx.gelu(nx.linear(features, params["mlp.w1"], params["mlp.b1"]))
    h = nx.dropout(h, dropout_rate, train, rng)
    logit = nx.linear(h, params["mlp.w2"], params["mlp.b2"])
    return nx.sigmoid(nx.reshape(logit, logit.shape[:-1]))


def qfrb_forward(t_ddm, angles, use_se: bool = True, xx_pairs=qsim.DEFAULT_XX_PAIRS) -> Tensor:
    return qsim.qfrb(t_ddm, angles, use_se, xx_pairs)


def cfeb_forward(t_ddm, params) -> Tensor:
    """Depthwise 2x2 conv ('same', zero pad right/bottom) + GELU, then 2x2 'valid' conv.

    ``(B, 64)`` -> 16 channels of 2x2 -> ``(B, 16)``.
    """
    t_ddm = nx.as_tensor(t_ddm)
    lead = t_ddm.shape[:-1]
    x = nx.reshape(t_ddm, lead + (N_CHANNELS, 2, 2))
    xp = nx.pad(x, [(0, 0)] * (len(lead) + 1) + [(0, 1), (0, 1)])
    k1, k2 = params["cfeb.k1"], params["cfeb.k2"]
    h = None
    for a in range(2):
        for b in range(2):
            w = nx.reshape(nx.index(k1, (slice(None), a, b)), (N_CHANNELS, 1, 1))
            term = nx.mul(w, nx.index(xp, (Ellipsis, slice(a, a + 2), slice(b, b + 2))))
            h = term if h is None else nx.add(h, term)
    h = nx.gelu(nx.add(h, nx.reshape(params["cfeb.b1"], (N_CHANNELS, 1, 1))))
    out = nx.tsum(nx.reshape(nx.mul(h, k2), lead + (N_CHANNELS, 4)), axis=-1)
    return nx.add(out, params["cfeb.b2"])


@dataclass
class BaseModel:
    params: dict
    dropout_rate: float = 0.1
    n_attn_heads: int = 1
    threshold: float = THRESHOLD

    kind = "base"

    def dat_params(self) -> dict:
        return {k[4:]: v for k, v in self.params.items() if k.startswith("dat.")}

    def encode(self, ddm_batch, train=False, rng=None) -> Tensor:
        return dat.dat_forward(ddm_batch, self.dat_params(), train, rng,
                               self.dropout_rate, self.n_attn_heads)

    def refine(self, t_ddm) -> Tensor:
        raise NotImplementedError

    def forward(self, ddm_batch, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        """Max-normalised DDMs ``(B, 17, 11)`` -> water probabilities ``(B,)``."""
        t = self.encode(ddm_batch, train, rng)
        return mlp_fuse(self.refine(t), self.params, train, rng, self.dropout_rate)

    def hyper(self) -> dict:
        return {"dropout_rate": self.dropout_rate, "n_attn_heads": self.n_attn_heads,
                "threshold": self.threshold}

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict):
        for k, v in arrays.items():
            self.params[k].data = np.asarray(v, dtype=np.float64).reshape(self.params[k].shape)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class IwdQueenModel(BaseModel):
    use_se: bool = True
    xx_pairs: tuple = qsim.DEFAULT_XX_PAIRS

    kind = "queen"

    @classmethod
    def init(cls, rng: np.random.Generator, use_se: bool = True, **kw) -> "IwdQueenModel":
        params = {f"dat.{k}": v for k, v in dat.init_params(rng).items()}
        params["qfrb.angles"] = Tensor(qsim.init_angles(rng), requires_grad=True)
        params.update(_mlp_params(rng, 2 * qsim.N_HEADS))
        return cls(params=params, use_se=use_se, **kw)

    def refine(self, t_ddm) -> Tensor:
        return qfrb_forward(t_ddm, self.params["qfrb.angles"], self.use_se, self.xx_pairs)

    def hyper(self) -> dict:
        h = super().hyper()
        h["xx_pairs"] = [list(p) for p in self.xx_pairs]
        return h


@dataclass
class IwdTransformerModel(BaseModel):
    use_se: bool = False

    kind = "transformer"

    @classmethod
    def init(cls, rng: np.random.Generator, **kw) -> "IwdTransformerModel":
        params = {f"dat.{k}": v for k, v in dat.init_params(rng).items()}
        params["cfeb.k1"] = _normal(rng, (N_CHANNELS, 2, 2), 4)
        params["cfeb.b1"] = _zeros((N_CHANNELS,))
        params["cfeb.k2"] = _normal(rng, (N_CHANNELS, 2, 2), 4)
        params["cfeb.b2"] = _zeros((N_CHANNELS,))
        params.update(_mlp_params(rng, N_CHANNELS))
        kw.pop("use_se", None)
        return cls(params=params, **kw)

    def refine(self, t_ddm) -> Tensor:
        return cfeb_forward(t_ddm, self.params)


MODEL_KINDS = {"queen": IwdQueenModel, "transformer": IwdTransformerModel}


def build_model(kind: str, seed: int, use_se: bool = True, **kw) -> BaseModel:
    try:
        cls = MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}") from None
    return cls.init(np.random.default_rng(seed), use_se=use_se, **kw)


# --- inference -------------------------------------------------------------

def predict_batch(model: BaseModel, ddms) -> np.ndarray:
    """Eval-mode probabilities for raw (un-normalised) DDMs ``(B, 17, 11)``."""
    x = np.stack([normalize(d) for d in ddms])
    with nx.no_grad():
        return model.forward(x, train=False).data.copy()


def predict(record: DdmRecord, model: BaseModel) -> float:
    return float(predict_batch(model, [record.ddm])[0])


def classify(p, threshold: float = THRESHOLD):
    """1 (water) iff ``p >= threshold``; works on scalars and arrays."""
    out = (np.asarray(p) >= threshold).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def parameter_census(model: BaseModel) -> dict:
    counts = {"qubits": 0, "quantum_angles": 0, "classical": 0}
    for name, t in model.params.items():
        if name == "qfrb.angles":
            n_heads = t.shape[0]
            counts["qubits"] = n_heads * qsim.N_QUBITS
            per_head = qsim.N_ANGLES if model.use_se else qsim.N_FE
            counts["quantum_angles"] = n_heads * per_head
        else:
            counts["classical"] += t.data.size
    groups = {}
    for name, t in model.params.items():
        group = name.split(".")[0]
        groups[group] = groups.get(group, 0) + t.data.size
    if "qfrb" in groups:
        groups["qfrb"] = counts["quantum_angles"]
    counts["by_group"] = groups
    return counts


# --- checkpoints -----------------------------------------------------------

def checkpoint_dict(model: BaseModel) -> dict:
    tensors = {}
    for name in sorted(model.params):
        arr = model.params[name].data
        tensors[name] = {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
    return {
        "format_version": FORMAT_VERSION,
        "model_kind": model.kind,
        "use_se": bool(model.use_se),
        "hyper": model.hyper(),
        "tensors": tensors,
    }


def save_checkpoint(model: BaseModel, path) -> None:
    text = json.dumps(checkpoint_dict(model), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


def model_from_checkpoint(obj: dict) -> BaseModel:
    if obj.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format {obj.get('format_version')!r}")
    kind = obj.get("model_kind")
    if kind not in MODEL_KINDS:
        raise DataError(f"unknown model_kind {kind!r}")
    hyper = dict(obj.get("hyper", {}))
    if "xx_pairs" in hyper:
        hyper["xx_pairs"] = tuple(tuple(p) for p in hyper["xx_pairs"])
    params = {}
    for name, t in obj["tensors"].items():
        data = np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])
        params[name] = Tensor(data, requires_grad=True)
    cls = MODEL_KINDS[kind]
    if kind == "queen":
        return cls(params=params, use_se=bool(obj["use_se"]), **hyper)
    return cls(params=params, **hyper)


def load_checkpoint(path) -> BaseModel:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read checkpoint ({exc})") from exc
    return model_from_checkpoint(obj)
