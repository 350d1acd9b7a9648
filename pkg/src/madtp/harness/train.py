"""Toy alignment training of the guidance module and the matching head.

The forward pass is mirrored in torch so gradients reach the learnable tokens
``E``, the per-layer projections and the 2-way head. The backbone stays
frozen but gradients still flow through it: through attention, through the
TIS weights of merged tokens, and through the kept rows. The discrete keep
mask is a stop-gradient. Sparsemax enters through a custom autograd function
backed by :func:`madtp.numerics.sparsemax_rows_vjp`.

torch is imported lazily so the rest of the package works without it.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..config import DataConfig, RunConfig, TrainConfig, VltConfig
from ..dtp import apply_policy, prune_mask
from ..errors import InvalidArgument, NonFiniteLoss
from ..mag import LearnableTokens, Mag, ProjectionWeights, init_mag
from ..numerics import sparsemax_rows, sparsemax_rows_vjp
from ..vlt import LN_EPS, classify, init_weights, model_forward
from .synthetic import gen_synthetic

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossBreakdown:
    l_task: float
    l_sim: float
    alpha: float
    total: float

    @classmethod
    def of(cls, l_task: float, l_sim: float, alpha: float) -> "LossBreakdown":
        return cls(float(l_task), float(l_sim), float(alpha), float(l_task + alpha * l_sim))


def toy_config(steps: int = 200) -> RunConfig:
    """Small configuration sized for training on a CPU in seconds."""
    model = VltConfig(layers=2, d_v=32, d_l=32, heads=4, n_patches=16, n_words=8,
                      n_learnable=8, d_k=32)
    data = DataConfig(n_concepts=8, min_planted=1, max_planted=3, patches_per_concept=4,
                      words_per_concept=2)
    return RunConfig(model=model, data=data, mode="train-toy", dataset_size=128,
                     train=TrainConfig(steps=steps, lr=0.05, batch_size=16))


def _cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(len(labels)), labels]))


def numpy_loss(cfg: VltConfig, weights, mag: Mag, images, texts, labels,
               temperature: float | None = None) -> LossBreakdown:
    """Reference loss from the numpy forward; the torch mirror must agree."""
    result = model_forward(images, texts, cfg, weights, mag, temperature=temperature)
    l_task = _cross_entropy(classify(result, weights), np.asarray(labels))
    return LossBreakdown.of(l_task, result.sim_loss, cfg.alpha)


# ----------------------------------------------------------------------------------------
# torch mirror


def _torch():
    import torch
    return torch


def _sparsemax_fn():
    torch = _torch()

    class Sparsemax(torch.autograd.Function):
        @staticmethod
        def forward(ctx, z):
            zn = z.detach().cpu().numpy()
            ctx.save_for_backward(z.detach())
            return torch.from_numpy(sparsemax_rows(zn))

        @staticmethod
        def backward(ctx, grad):
            (z,) = ctx.saved_tensors
            return torch.from_numpy(sparsemax_rows_vjp(z.numpy(), grad.detach().numpy()))

    return Sparsemax


class TorchMirror:
    """Differentiable copy of the forward pass for a fixed frozen backbone."""

    def __init__(self, cfg: VltConfig, weights, mag: Mag):
        torch = _torch()
        self.torch = torch
        self.cfg = cfg
        t = lambda a, grad=False: torch.tensor(np.asarray(a, dtype=np.float64),  # noqa: E731
                                              requires_grad=grad)
        self._t = t
        self.frozen = {
            m: [{k: (t(v) if isinstance(v, np.ndarray) else
                     None if v is None else {kk: t(vv) for kk, vv in asdict(v).items()})
                 for k, v in asdict_shallow(b).items()} for b in weights.blocks(m)]
            for m in ("vision", "language")
        }
        self.embed = {m: {k: t(v) for k, v in asdict(weights.embedding(m)).items()}
                      for m in ("vision", "language")}
        p = mag.projections
        self.params = {
            "E": t(mag.tokens.E, True),
            "w_v": [t(w, True) for w in p.w_v], "b_v": [t(b, True) for b in p.b_v],
            "w_t": [t(w, True) for w in p.w_t], "b_t": [t(b, True) for b in p.b_t],
            "head_w": t(weights.head_w, True), "head_b": t(weights.head_b, True),
        }
        self.sparsemax = _sparsemax_fn()

    def parameters(self) -> list:
        p = self.params
        return [p["E"], *p["w_v"], *p["b_v"], *p["w_t"], *p["b_t"], p["head_w"], p["head_b"]]

    def export(self):
        """Current parameters as ``(Mag, head_w, head_b)`` numpy objects."""
        p = self.params
        n = lambda x: x.detach().numpy().copy()  # noqa: E731
        mag = Mag(LearnableTokens(n(p["E"])),
                  ProjectionWeights([n(w) for w in p["w_v"]], [n(b) for b in p["b_v"]],
                                    [n(w) for w in p["w_t"]], [n(b) for b in p["b_t"]]))
        return mag, n(p["head_w"]), n(p["head_b"])

    # -- pieces --------------------------------------------------------------------------

    def _ln(self, x, g, b):
        mu = x.mean(dim=-1, keepdim=True)
        var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
        return (x - mu) / self.torch.sqrt(var + LN_EPS) * g + b

    def _gelu(self, x):
        return 0.5 * x * (1.0 + self.torch.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))

    def _heads(self, x):
        n, d = x.shape
        h = self.cfg.heads
        return x.reshape(n, h, d // h).transpose(0, 1)

    def _attend(self, q, k, v, d):
        logits = q @ k.transpose(1, 2) / math.sqrt(d // self.cfg.heads)
        attn = self.torch.softmax(logits, dim=-1)
        n = q.shape[1]
        return (attn @ v).transpose(0, 1).reshape(n, d), attn

    def _mhsa(self, x, w):
        d = x.shape[1]
        h = self._ln(x, w["ln1_g"], w["ln1_b"])
        ctx, attn = self._attend(self._heads(h @ w["wq"] + w["bq"]),
                                 self._heads(h @ w["wk"] + w["bk"]),
                                 self._heads(h @ w["wv"] + w["bv"]), d)
        return x + ctx @ w["wo"] + w["bo"], attn.mean(dim=0)

    def _cross(self, x, c, cw):
        d = x.shape[1]
        h = self._ln(x, cw["ln_g"], cw["ln_b"])
        ctx, _ = self._attend(self._heads(h @ cw["wq"]), self._heads(c @ cw["wk"]),
                              self._heads(c @ cw["wv"]), d)
        return x + ctx @ cw["wo"]

    def _ffn(self, x, w):
        h = self._ln(x, w["ln2_g"], w["ln2_b"])
        return x + self._gelu(h @ w["w1"] + w["b1"]) @ w["w2"] + w["b2"]

    def _mag(self, x, modality, layer):
        key = "v" if modality == "vision" else "t"
        mapped = x @ self.params[f"w_{key}"][layer].T + self.params[f"b_{key}"][layer]
        E = self.params["E"]
        a = self.torch.softmax(E @ mapped.T / math.sqrt(E.shape[1]), dim=1)
        return a, a @ mapped

    def _tis(self, a_self, a_tok):
        parts = {"cls": a_self[0] / a_self[0].sum(),
                 "self": a_self.max(dim=0).values / a_self.max(dim=0).values.sum(),
                 "token": a_tok.max(dim=0).values / a_tok.max(dim=0).values.sum()}
        chosen = [parts[c] for c in self.cfg.tis_components]
        return sum(chosen[1:], chosen[0]) / len(chosen)

    def _prune(self, xs, maps, temperature, enabled):
        if not enabled:
            return xs
        tis = [self._tis(a_self, a_tok) for a_self, a_tok in maps]
        masks = []
        for (_, a_tok), s in zip(maps, tis):
            a_hat = self.sparsemax.apply(temperature * a_tok)
            theta = (a_hat @ s).min()
            # the mask is discrete: values leave the graph here
            masks.append(prune_mask(s.detach().numpy(), float(theta.detach())))
        masks = apply_policy(masks, [s.detach().numpy() for s in tis], self.cfg.keep_policy)
        out = []
        for x, s, keep in zip(xs, tis, masks):
            keep_t = self.torch.from_numpy(keep)
            rows = x[keep_t]
            if not keep.all():
                pruned = ~keep_t
                w = s[pruned]
                merged = (w @ x[pruned]) / w.sum() if float(w.sum().detach()) > 0 else x[pruned].mean(dim=0)
                rows = self.torch.cat([rows, merged[None, :]], dim=0)
            out.append(rows)
        return out

    def _tokenize(self, raw, modality):
        e = self.embed[modality]
        return [self.torch.cat([e["special"][None, :], self._t(r) @ e["w"] + e["pos"]], dim=0)
                for r in raw]

    def forward(self, images, texts, temperature: float | None = None):
        """Returns ``(logits, sim loss)`` as torch scalars/tensors."""
        torch = self.torch
        cfg = self.cfg
        temperature = cfg.temperature if temperature is None else temperature
        v = self._tokenize(images, "vision")
        t = self._tokenize(texts, "language")
        sims = []
        for layer in range(cfg.layers):
            feats = {}
            for modality in ("vision", "language"):
                xs = v if modality == "vision" else t
                w = self.frozen[modality][layer]
                stepped = [self._mhsa(x, w) for x in xs]
                xs = [s[0] for s in stepped]
                guided = [self._mag(x, modality, layer) for x in xs]
                feats[modality] = [g[1] for g in guided]
                maps = [(s[1], g[0]) for s, g in zip(stepped, guided)]
                xs = self._prune(xs, maps, temperature, cfg.prunes(modality))
                if modality == "language" and cfg.cross_attention:
                    xs = [self._cross(x, c, w["cross"]) for x, c in zip(xs, v)]
                xs = [self._ffn(x, w) for x in xs]
                if modality == "vision":
                    v = xs
                else:
                    t = xs
            per_pair = [(1.0 - torch.nn.functional.cosine_similarity(a, b, dim=1)).mean()
                        for a, b in zip(feats["vision"], feats["language"])]
            sims.append(torch.stack(per_pair).mean())
        sim = sims[-1] if cfg.sim_loss_layers == "last" else torch.stack(sims).mean()
        cat = torch.stack([torch.cat([a[0], b[0]]) for a, b in zip(v, t)])
        logits = cat @ self.params["head_w"] + self.params["head_b"]
        return logits, sim

    def loss(self, images, texts, labels, temperature: float | None = None):
        logits, sim = self.forward(images, texts, temperature)
        task = self.torch.nn.functional.cross_entropy(
            logits, self.torch.as_tensor(np.asarray(labels), dtype=self.torch.long))
        total = task + self.cfg.alpha * sim
        return total, LossBreakdown.of(float(task.detach()), float(sim.detach()), self.cfg.alpha)


def asdict_shallow(obj) -> dict:
    return {k: getattr(obj, k) for k in obj.__dataclass_fields__}


# ----------------------------------------------------------------------------------------


@dataclass
class TrainResult:
    mag: Mag
    head_w: np.ndarray
    head_b: np.ndarray
    initial: LossBreakdown
    final: LossBreakdown
    history: list = field(default_factory=list)   # LossBreakdown per step, before the update


def run_train_toy(config: RunConfig, out_dir=None) -> TrainResult:
    """Adam on ``L = L_task + alpha * L_sim`` for ``config.train.steps`` steps.

    ``initial`` and ``final`` are evaluated on the whole training set; each
    history entry is the loss of that step's mini-batch.
    """
    torch = _torch()
    cfg = config.model
    tc = config.train
    if config.dataset_size < 1:
        raise InvalidArgument("training needs a non-empty dataset")
    torch.manual_seed(cfg.seed)
    data = gen_synthetic(cfg, config.data, config.dataset_size, config.data_seed)
    mirror = TorchMirror(cfg, init_weights(cfg), init_mag(cfg))
    opt = torch.optim.Adam(mirror.parameters(), lr=tc.lr)
    rng = np.random.default_rng([config.data_seed, 4001])

    def evaluate():
        with torch.no_grad():
            return mirror.loss(data.images, data.texts, data.labels)[1]

    initial = evaluate()
    history = []
    for step in range(tc.steps):
        idx = rng.choice(len(data), size=min(tc.batch_size, len(data)), replace=False)
        total, parts = mirror.loss(data.images[idx], data.texts[idx], data.labels[idx])
        if not math.isfinite(parts.total):
            state = {"step": step, "loss": asdict(parts),
                     "param_norms": [float(p.detach().norm()) for p in mirror.parameters()]}
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                (Path(out_dir) / "nonfinite_state.json").write_text(json.dumps(state, indent=2))
            raise NonFiniteLoss(f"non-finite loss at step {step}: {parts}", state)
        history.append(parts)
        opt.zero_grad()
        total.backward()
        opt.step()
        if step % 50 == 0:
            log.info("step %d: L_task=%.4f L_sim=%.4f", step, parts.l_task, parts.l_sim)
    final = evaluate() if tc.steps else initial
    mag, head_w, head_b = mirror.export()
    result = TrainResult(mag, head_w, head_b, initial, final, history)
    if out_dir is not None:
        write_train_outputs(result, out_dir)
    return result


def write_train_outputs(result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = result.mag.projections
    np.savez(out / "mag_params.npz", E=result.mag.tokens.E, head_w=result.head_w,
             head_b=result.head_b,
             **{f"w_v{i}": w for i, w in enumerate(p.w_v)}, **{f"b_v{i}": b for i, b in enumerate(p.b_v)},
             **{f"w_t{i}": w for i, w in enumerate(p.w_t)}, **{f"b_t{i}": b for i, b in enumerate(p.b_t)})
    lines = ["step\tl_task\tl_sim\talpha\ttotal"]
    lines += [f"{i}\t{h.l_task!r}\t{h.l_sim!r}\t{h.alpha!r}\t{h.total!r}"
              for i, h in enumerate(result.history)]
    (out / "loss_curve.tsv").write_text("\n".join(lines) + "\n")
    (out / "loss_summary.json").write_text(json.dumps(
        {"initial": asdict(result.initial), "final": asdict(result.final)}, indent=2) + "\n")


__all__ = ["LossBreakdown", "TorchMirror", "TrainResult", "numpy_loss", "run_train_toy",
           "toy_config"]
