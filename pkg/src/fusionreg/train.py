"""Optimization harness: Adam, staged pair sampling, validation-based
checkpointing, and deterministic save/resume.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, losses, metrics, transform
from .losses import LossConfig
from .model import (
    ModelConfig,
    build_model,
    read_tensor_file,
    save_checkpoint,
    write_tensor_file,
)
from .tensor import Tape, backward


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-4
    batch: int = 1
    total_iters: int = 2000
    stages: tuple = ("uniform",)
    stage_boundaries: tuple = ()  # iteration at which stage k+1 begins
    val_every: int = 1000
    seed: int = 0
    out_dir: str = "run"

    def __post_init__(self):
        self.stages = tuple(self.stages)
        self.stage_boundaries = tuple(int(b) for b in self.stage_boundaries)
        if self.batch != 1:
            raise ValueError("only batch size 1 is supported")
        if len(self.stage_boundaries) != len(self.stages) - 1:
            raise ValueError("need exactly one boundary between consecutive stages")
        if list(self.stage_boundaries) != sorted(self.stage_boundaries):
            raise ValueError("stage boundaries must be increasing")
        if self.stage_boundaries and self.stage_boundaries[-1] > self.total_iters:
            raise ValueError("stage boundaries must be <= total_iters")

    def stage_at(self, iteration):
        k = 0
        for b in self.stage_boundaries:
            if iteration >= b:
                k += 1
        return self.stages[k]

    def to_text(self):
        lines = self.model.to_lines("model.")
        lines += [
            f"loss.sigma={self.loss.sigma}",
            f"loss.lambda_prec={self.loss.lambda_prec}",
            f"loss.mu_jd={self.loss.mu_jd}",
            f"loss.alpha={self.loss.alpha}",
            f"loss.beta={self.loss.beta}",
            f"loss.ncc_window={self.loss.ncc_window}",
            f"loss.focal_gamma={self.loss.focal_gamma}",
            f"loss.focal_alpha={self.loss.focal_alpha}",
            f"loss.dice_eps={self.loss.dice_eps}",
            f"train.lr={self.lr}",
            f"train.batch={self.batch}",
            f"train.total_iters={self.total_iters}",
            f"train.stages={','.join(self.stages)}",
            f"train.stage_boundaries={','.join(str(b) for b in self.stage_boundaries)}",
            f"train.val_every={self.val_every}",
            f"train.seed={self.seed}",
            f"train.out_dir={self.out_dir}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kv = {}
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {ln}: expected key=value, got '{line}'")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        model_cfg = ModelConfig.from_mapping(kv, "model.")
        loss_cfg = LossConfig(
            sigma=float(kv.get("loss.sigma", 0.01)),
            lambda_prec=float(kv.get("loss.lambda_prec", 50.0)),
            mu_jd=float(kv.get("loss.mu_jd", 1e-5)),
            alpha=float(kv.get("loss.alpha", 1.0)),
            beta=float(kv.get("loss.beta", 1.0)),
            ncc_window=int(kv.get("loss.ncc_window", 9)),
            focal_gamma=float(kv.get("loss.focal_gamma", 2.0)),
            focal_alpha=float(kv.get("loss.focal_alpha", 1.0)),
            dice_eps=float(kv.get("loss.dice_eps", 1e-5)),
        )
        bounds = kv.get("train.stage_boundaries", "")
        return cls(
            model=model_cfg,
            loss=loss_cfg,
            lr=float(kv.get("train.lr", 1e-4)),
            batch=int(kv.get("train.batch", 1)),
            total_iters=int(kv.get("train.total_iters", 2000)),
            stages=tuple(kv.get("train.stages", "uniform").split(",")),
            stage_boundaries=tuple(int(b) for b in bounds.split(",") if b),
            val_every=int(kv.get("train.val_every", 1000)),
            seed=int(kv.get("train.seed", 0)),
            out_dir=kv.get("train.out_dir", "run"),
        )


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    def __init__(self, params):
        self.step = 0
        self.m = {k: np.zeros_like(t.data) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in params.items()}


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard bias-corrected update over every parameter with a gradient."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"adam: gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# training loop


class _VolumeCache:
    """Small read-through cache so the sampler's disk reads stay off the
    iteration budget (datasets at desk scale fit in memory)."""

    def __init__(self):
        self.store = {}

    def entry(self, e):
        img = self.store.get(e.image)
        if img is None:
            img = data.read_fvol(e.image)
            self.store[e.image] = img
        lab = None
        if e.label:
            lab = self.store.get(e.label)
            if lab is None:
                lab = data.read_fvol(e.label)
                self.store[e.label] = lab
        return img, lab


def _validation_pairs(manifest):
    """Fixed/moving pairs with labels, one per subject (intra) or consecutive
    subjects (inter), used for the validation DSC."""
    pairs = []
    if manifest.intra:
        for _, frames in manifest.subjects():
            fixed = [e for e in frames if e.frame == "fix"]
            moving = [e for e in frames if e.frame == "mov"]
            if fixed and moving:
                pairs.append((fixed[0], moving[0]))
    else:
        subs = [entries[0] for _, entries in manifest.subjects()]
        for a, b in zip(subs, subs[1:]):
            pairs.append((a, b))
    return pairs


def _mean_val_dsc(model, pairs, cache, n_labels):
    scores = []
    for fe, me in pairs:
        fi, fl = cache.entry(fe)
        mi, ml = cache.entry(me)
        if fl is None or ml is None:
            continue
        rep = metrics.evaluate_pair(model, fi, mi, fl, ml, n_labels)
        scores.append(rep.mean_after)
    if not scores:
        raise ValueError("validation manifest has no labeled pairs")
    return float(np.mean(scores))


def train(config, train_manifest, val_manifest, resume_from=None, log_fn=None):
    """Sample -> forward -> loss -> backward -> Adam, with periodic validation.

    Keeps the checkpoint with the highest validation DSC in
    out_dir/best.ckpt, streams per-iteration loss terms into
    out_dir/loss_log.csv, and stores resumable state in out_dir/last_state.
    Returns (best checkpoint path, history dict).
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config.to_text())

    rng = np.random.default_rng(config.seed)
    net = build_model(config.model, rng)
    state = AdamState(net.params)
    start_iter = 0
    best_score = -1.0

    if resume_from is not None:
        start_iter, best_score = _load_state(Path(resume_from), net, state, rng)

    cache = _VolumeCache()
    val_pairs = _validation_pairs(val_manifest)
    n_labels = config.model.n_labels or _infer_n_labels(val_manifest, cache)
    semi = config.model.mode == "semisupervised"
    best_path = out_dir / "best.ckpt"
    history = {"val": [], "loss": []}

    log_file = open(out_dir / "loss_log.csv", "w" if start_iter == 0 else "a")
    if start_iter == 0:
        log_file.write("iter,total,ncc,kl,jd,seg,fuse\n")

    def validate(iteration):
        nonlocal best_score
        score = _mean_val_dsc(net, val_pairs, cache, n_labels)
        history["val"].append((iteration, score))
        if score > best_score:
            best_score = score
            save_checkpoint(best_path, net)
        if log_fn:
            log_fn(f"iter {iteration}: val DSC {score:.4f} (best {best_score:.4f})")
        return score

    if start_iter == 0:
        validate(0)

    for it in range(start_iter, config.total_iters):
        stage = config.stage_at(it)
        fixed_e, moving_e = _sample_entries(train_manifest, config.model.mode, stage, rng)
        fixed_img, fixed_lab = cache.entry(fixed_e)
        moving_img, moving_lab = cache.entry(moving_e)
        if config.model.mode == "unsupervised":
            fixed_lab = moving_lab = None

        fixed_t = fixed_img.tensor()
        moving_t = moving_img.tensor()
        with Tape():
            out = net.forward(fixed_t, moving_t)
            v = transform.sample_velocity(out.flow_params, rng)
            psi = transform.upsample_flow(transform.integrate_ss(v, 7))
            warped = transform.warp(moving_t, psi)
            if semi:
                total, terms = losses.semisupervised_loss(
                    fixed_t, warped, out.flow_params, psi,
                    out.seg_f, out.seg_m,
                    fixed_lab.data if fixed_lab is not None else None,
                    moving_lab.data if moving_lab is not None else None,
                    config.model.n_labels, config.loss,
                )
            else:
                total, terms = losses.unsupervised_loss(
                    fixed_t, warped, out.flow_params, psi, config.loss
                )
            loss_val = total.item()
            if not np.isfinite(loss_val):
                log_file.close()
                raise TrainingDiverged(
                    f"non-finite loss at iteration {it}: {terms}"
                )
            net.zero_grads()
            backward(total)
        adam_step(net.params, state, config.lr)

        log_file.write(
            f"{it},{loss_val:.6f},{terms['ncc']:.6f},{terms['kl']:.6f},"
            f"{terms['jd']:.6e},{terms['seg']:.6f},{terms['fuse']:.6f}\n"
        )
        history["loss"].append(loss_val)
        if (it + 1) % config.val_every == 0 or it + 1 == config.total_iters:
            validate(it + 1)

    _save_state(out_dir / "last_state", net, state, rng,
                config.total_iters, best_score)
    log_file.close()
    if not best_path.exists():  # total_iters == 0 and no validation improvement
        save_checkpoint(best_path, net)
    return best_path, history


def _infer_n_labels(manifest, cache):
    n = 0
    for e in manifest.entries:
        if e.label:
            _, lab = cache.entry(e)
            n = max(n, int(lab.data.max()) + 1)
    if n < 2:
        raise ValueError("cannot infer label count from an unlabeled manifest")
    return n


def _sample_entries(manifest, mode, stage, rng):
    """Entry-level twin of data.sample_training_pair (keeps volumes cached)."""
    candidates = data.candidate_pairs(manifest, stage)
    return candidates[rng.integers(len(candidates))]


# ---------------------------------------------------------------------------
# resumable state


def _save_state(prefix, net, state, rng, iteration, best_score):
    arrays = {f"param.{k}": t.data for k, t in net.params.items()}
    arrays.update({f"adam.m.{k}": v for k, v in state.m.items()})
    arrays.update({f"adam.v.{k}": v for k, v in state.v.items()})
    write_tensor_file(f"{prefix}.tensors", arrays)
    meta = {
        "iteration": iteration,
        "adam_step": state.step,
        "best_score": best_score,
        "rng_state": _encode_rng(rng),
    }
    Path(f"{prefix}.json").write_text(json.dumps(meta))


def _load_state(prefix, net, state, rng):
    arrays = read_tensor_file(f"{prefix}.tensors")
    for k, t in net.params.items():
        t.data = arrays[f"param.{k}"].astype(t.dtype)
        state.m[k] = arrays[f"adam.m.{k}"].astype(t.dtype)
        state.v[k] = arrays[f"adam.v.{k}"].astype(t.dtype)
    meta = json.loads(Path(f"{prefix}.json").read_text())
    state.step = int(meta["adam_step"])
    _decode_rng(rng, meta["rng_state"])
    return int(meta["iteration"]), float(meta["best_score"])


def _encode_rng(rng):
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": st["has_uint32"],
        "uinteger": st["uinteger"],
    }


def _decode_rng(rng, enc):
    rng.bit_generator.state = {
        "bit_generator": enc["bit_generator"],
        "state": {"state": int(enc["state"]), "inc": int(enc["inc"])},
        "has_uint32": enc["has_uint32"],
        "uinteger": enc["uinteger"],
    }
