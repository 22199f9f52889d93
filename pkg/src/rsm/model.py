"""A single memory layer with an attached label classifier.

Both parts train on every step from the current input only. The classifier
reads a copy of the recurrent input the layer will consume next; nothing it
computes flows back into the layer.
"""

from __future__ import annotations

from ast import literal_eval

import numpy as np

from . import layer
from .classifier import MlpParams, classify, init_mlp
from .classifier import train_step as mlp_train_step
from .kernels import AdamState, Optimizer
from .prng import Xoshiro256


def pack_optimizer(prefix: str, opt: Optimizer, config: dict, tensors: dict) -> None:
    config[f"{prefix}.lr"] = repr(opt.lr)
    for name, st in opt.states.items():
        tensors[f"{prefix}.{name}.m"] = st.m
        tensors[f"{prefix}.{name}.v"] = st.v
        config[f"{prefix}.{name}.step"] = str(st.step)


def unpack_optimizer(prefix: str, config: dict, tensors: dict) -> Optimizer:
    opt = Optimizer(lr=float(config[f"{prefix}.lr"]))
    for key, value in config.items():
        if key.startswith(prefix + ".") and key.endswith(".step"):
            name = key[len(prefix) + 1:-len(".step")]
            opt.states[name] = AdamState(tensors[f"{prefix}.{name}.m"].copy(),
                                         tensors[f"{prefix}.{name}.v"].copy(),
                                         step=int(value), lr=opt.lr)
    return opt


class MemoryModel:
    def __init__(self, config: layer.RsmConfig, hidden: int, labels: int, batch: int, rng,
                 lr: float = 0.0005, l2: float = 1e-5, slope: float = 0.2,
                 classifier_dropout: bool = False, classifier_input: str = "xR"):
        if classifier_input not in ("xR", "psi"):
            raise ValueError(f"classifier_input must be 'xR' or 'psi', got {classifier_input!r}")
        self.config = config
        self.rng = rng
        self.params = layer.init_params(config, rng)
        self.mlp = init_mlp(config.size, hidden, labels, rng, l2=l2, slope=slope)
        self.opt = Optimizer(lr=lr)
        self.mlp_opt = Optimizer(lr=lr)
        self.state = layer.reset_state(config, batch)
        self.classifier_dropout = classifier_dropout
        self.classifier_input = classifier_input
        self.last_trace = None

    @property
    def batch(self) -> int:
        return self.state.xR.shape[0]

    def reset(self, batch: int | None = None) -> None:
        self.state = layer.reset_state(self.config, batch or self.batch)

    def reset_rows(self, rows) -> None:
        """Zero the state of the rows flagged in a boolean mask."""
        for t in (self.state.phi, self.state.psi, self.state.xR):
            t[rows] = 0

    def features(self, state=None, training=False):
        """Classifier input: normalised x^R, or the raw integrated activity psi."""
        state = state or self.state
        x = state.xR if self.classifier_input == "xR" else state.psi.reshape(state.psi.shape[0], -1)
        if training and self.classifier_dropout and self.config.recurrent_dropout > 0:
            x = layer.recurrent_dropout(x, self.config.recurrent_dropout, self.rng)
        return x.copy()

    def train_step(self, xF, next_xF, labels=None, forget=True):
        """forget -> forward -> local MSE + Adam -> classifier step.

        Returns (rsm_loss, classifier_loss or None).
        """
        if forget:
            layer.apply_forget(self.state, self.config, self.rng)
        trace, nxt = layer.forward(self.params, self.config, self.state, xF, rng=self.rng,
                                   training=True)
        rsm_loss, grads = layer.loss_and_grads(trace, next_xF, self.params)
        self.opt.step(self.params.named(), grads)
        self.state = nxt
        self.last_trace = trace
        clf_loss = None
        if labels is not None:
            clf_loss = mlp_train_step(self.mlp, self.features(nxt, True), labels, self.mlp_opt)
        return rsm_loss, clf_loss

    def predict(self, xF) -> np.ndarray:
        """Advance the state by one input and return label probabilities."""
        trace, self.state = layer.forward(self.params, self.config, self.state, xF)
        self.last_trace = trace
        return classify(self.mlp, self.features())[1]

    def to_checkpoint(self) -> tuple[dict, dict]:
        config = {f"rsm.{k}": repr(v) for k, v in vars(self.config).items()}
        config.update({"mlp.l2": repr(self.mlp.l2), "mlp.slope": repr(self.mlp.slope),
                       "mlp.classifier_dropout": str(int(self.classifier_dropout)),
                       "mlp.classifier_input": self.classifier_input,
                       "rng": self.rng.getstate()})
        tensors = {f"rsm.{k}": v for k, v in self.params.named().items()}
        tensors.update({f"mlp.{k}": v for k, v in self.mlp.named().items()})
        tensors.update({"state.phi": self.state.phi, "state.psi": self.state.psi,
                        "state.xR": self.state.xR})
        if self.opt is not None:
            pack_optimizer("adam.rsm", self.opt, config, tensors)
            pack_optimizer("adam.mlp", self.mlp_opt, config, tensors)
        return config, tensors

    @classmethod
    def from_checkpoint(cls, config: dict, tensors: dict) -> "MemoryModel":
        rsm_cfg = layer.config_from_dict(
            {k[4:]: literal_eval(v) for k, v in config.items() if k.startswith("rsm.")})
        m = cls.__new__(cls)
        m.config = rsm_cfg
        m.rng = Xoshiro256()
        m.rng.setstate(config["rng"])
        t = {k: v.copy() for k, v in tensors.items()}
        m.params = layer.RsmParams(wF=t["rsm.wF"], wR=t["rsm.wR"], wD=t["rsm.wD"],
                                   wB=t.get("rsm.wB"))
        m.mlp = MlpParams(t["mlp.w1"], t["mlp.b1"], t["mlp.w2"], t["mlp.b2"],
                          l2=float(config["mlp.l2"]), slope=float(config["mlp.slope"]))
        m.state = layer.RsmState(t["state.phi"], t["state.psi"], t["state.xR"])
        m.classifier_dropout = bool(int(config["mlp.classifier_dropout"]))
        m.classifier_input = config.get("mlp.classifier_input", "xR")
        m.opt = unpack_optimizer("adam.rsm", config, t) if "adam.rsm.lr" in config else None
        m.mlp_opt = unpack_optimizer("adam.mlp", config, t) if "adam.mlp.lr" in config else None
        m.last_trace = None
        return m

    def eval_clone(self, batch: int | None = None) -> "MemoryModel":
        """Shares weights read-only; state is copied (or fresh when batch differs)."""
        other = MemoryModel.__new__(MemoryModel)
        other.__dict__.update(self.__dict__)
        other.opt = other.mlp_opt = None
        if batch is None or batch == self.batch:
            other.state = self.state.copy()
        else:
            other.state = layer.reset_state(self.config, batch)
        return other
