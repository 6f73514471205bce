"""Training loop, optimizers, configuration, metrics, and evaluation.

Runs are deterministic end to end: phantom layouts, parameter init, and
epoch shuffles all derive from PCG64 streams seeded in the config, losses
are logged with repr-exact floats, and checkpoints serialize parameters in
registration order. Two runs of the same config on the same machine and
thread settings produce byte-identical metrics files and checkpoints.

The generator trains with Adam plus decoupled weight decay; the
discriminator with plain SGD. The learning rate is flat for the first
decay_start epochs and decays exponentially afterwards.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import gan
from .autodiff.engine import Tensor, using_dtype
from .autodiff.ops import add, mse_loss, mul_scalar
from .projector import ProjectionModel, project_array
from .volcore import CtVolume, DrrImage, View, make_phantom, random_spec


class ConfigError(ValueError):
    """Invalid configuration value or unknown config key."""


class TrainingDiverged(RuntimeError):
    """A loss went non-finite during training."""


@dataclass
class TrainConfig:
    # model
    model_kind: str = "ga"              # ga | baseline | vq
    n: int = 16
    base_channels: int = 8
    lift_channels: int = 16
    reduction: int = 8
    lambda_rec: float = 0.1
    embed_dim: int = 32
    codebook_size: int = 128
    beta: float = 0.25
    model_seed: int = 0
    # optimization
    epochs: int = 100
    lr: float = 2e-4
    weight_decay: float = 1e-6
    decay_start: int = 50
    decay_gamma: float = 0.95
    batch: int = 2
    train_seed: int = 0
    checkpoint_interval: int = 0        # 0 = final checkpoint only
    # loss weights
    lambda_recon: float = 10.0
    lambda_proj: float = 10.0
    lambda_adv: float = 1.0
    lambda_perc: float = 0.1
    lambda_vq: float = 1.0
    # data
    data_count: int = 20
    data_holdout: int = 4
    data_seed: int = 100
    n_ellipsoids: int = 5
    intensity_lo: float = 0.3
    intensity_hi: float = 1.0
    # projection physics
    projection_model: str = "mean"
    mu: float = 4.0
    # perceptual feature net
    perc_channels: int = 8
    perc_slices: int = 4
    perc_seed: int = 7777

    def validate(self):
        problems = []
        if self.model_kind not in ("ga", "baseline", "vq"):
            problems.append(f"model.kind must be ga|baseline|vq, got {self.model_kind!r}")
        elif self.model_kind == "vq":
            if self.n < 16 or self.n % 8:
                problems.append(f"model.n must be a multiple of 8 and >= 16, got {self.n}")
            elif self.embed_dim % (self.n // 8):
                problems.append(f"model.embed_dim {self.embed_dim} must divide by "
                                f"n/8 = {self.n // 8}")
        else:
            if self.n < 16 or self.n % 16:
                problems.append(f"model.n must be a multiple of 16, got {self.n}")
        for fname in ("base_channels", "lift_channels", "reduction", "embed_dim",
                      "codebook_size", "epochs", "batch", "data_count",
                      "n_ellipsoids", "perc_channels", "perc_slices"):
            if getattr(self, fname) < 1:
                problems.append(f"{fname} must be >= 1, got {getattr(self, fname)}")
        if self.model_kind in ("ga", "baseline") and self.base_channels * 12 < self.reduction:
            problems.append("attention channels below reduction; raise base_channels")
        if not self.lr > 0:
            problems.append(f"train.lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            problems.append(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.decay_gamma <= 1:
            problems.append(f"train.decay_gamma must be in (0, 1], got {self.decay_gamma}")
        if self.decay_start < 0:
            problems.append(f"train.decay_start must be >= 0, got {self.decay_start}")
        if self.checkpoint_interval < 0:
            problems.append("train.checkpoint_interval must be >= 0")
        for fname in ("lambda_rec", "lambda_recon", "lambda_proj", "lambda_adv",
                      "lambda_perc", "lambda_vq", "beta"):
            if getattr(self, fname) < 0:
                problems.append(f"{fname} must be >= 0, got {getattr(self, fname)}")
        if not 0 <= self.data_holdout < self.data_count:
            problems.append(f"data.holdout must be in [0, data.count), got {self.data_holdout}")
        if not 0 <= self.intensity_lo <= self.intensity_hi <= 1:
            problems.append(f"bad intensity range [{self.intensity_lo}, {self.intensity_hi}]")
        if self.projection_model not in ("mean", "beer"):
            problems.append(f"project.model must be mean|beer, got {self.projection_model!r}")
        if self.projection_model == "beer" and not self.mu > 0:
            problems.append(f"project.mu must be > 0, got {self.mu}")
        if self.perc_slices > self.n:
            problems.append(f"perceptual.slices must be <= n, got {self.perc_slices}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self


# dotted config-file key -> TrainConfig field
KEY_MAP = {
    "model.kind": "model_kind",
    "model.n": "n",
    "model.base_channels": "base_channels",
    "model.lift_channels": "lift_channels",
    "model.reduction": "reduction",
    "model.lambda_rec": "lambda_rec",
    "model.embed_dim": "embed_dim",
    "model.codebook_size": "codebook_size",
    "model.beta": "beta",
    "model.seed": "model_seed",
    "train.epochs": "epochs",
    "train.lr": "lr",
    "train.weight_decay": "weight_decay",
    "train.decay_start": "decay_start",
    "train.decay_gamma": "decay_gamma",
    "train.batch": "batch",
    "train.seed": "train_seed",
    "train.checkpoint_interval": "checkpoint_interval",
    "loss.recon": "lambda_recon",
    "loss.proj": "lambda_proj",
    "loss.adv": "lambda_adv",
    "loss.perc": "lambda_perc",
    "loss.vq": "lambda_vq",
    "data.count": "data_count",
    "data.holdout": "data_holdout",
    "data.seed": "data_seed",
    "data.ellipsoids": "n_ellipsoids",
    "data.intensity_lo": "intensity_lo",
    "data.intensity_hi": "intensity_hi",
    "project.model": "projection_model",
    "project.mu": "mu",
    "perceptual.channels": "perc_channels",
    "perceptual.slices": "perc_slices",
    "perceptual.seed": "perc_seed",
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _coerce(key, field, raw):
    want = _FIELD_TYPES[field]
    raw = raw.strip()
    try:
        if want == "int":
            return int(raw)
        if want == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key}: cannot parse {raw!r} as {want}") from None


def parse_config_text(text, base=None):
    """Flat `key = value` lines; '#' comments; unknown keys are errors."""
    cfg = dataclasses.replace(base) if base is not None else TrainConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected key = value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in KEY_MAP:
            known = ", ".join(sorted(KEY_MAP))
            raise ConfigError(f"config line {lineno}: unknown key {key!r} (known: {known})")
        field = KEY_MAP[key]
        setattr(cfg, field, _coerce(key, field, raw))
    return cfg


def load_config(path, overrides=()):
    with open(path, "r", encoding="utf-8") as fh:
        cfg = parse_config_text(fh.read())
    for ov in overrides:
        cfg = parse_config_text(ov, base=cfg)
    return cfg.validate()


def apply_overrides(cfg, overrides):
    for ov in overrides:
        cfg = parse_config_text(ov, base=cfg)
    return cfg


# ---------------------------------------------------------------------------
# optimizers and schedule


def lr_at(epoch, lr, decay_start, gamma):
    """Flat until decay_start (0-based epochs), then lr * gamma^(k+1)."""
    if epoch < decay_start:
        return lr
    return lr * gamma ** (epoch - decay_start + 1)


class Adam:
    """Adam with decoupled weight decay on the raw parameters."""

    def __init__(self, tensors, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.tensors = list(tensors)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(t.data) for t in self.tensors]
        self.v = [np.zeros_like(t.data) for t in self.tensors]

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, t in enumerate(self.tensors):
            if t.grad is None:
                continue
            g = t.grad
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * (g * g)
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * t.data
            t.data = t.data - lr * update

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None


class SGD:
    """Plain gradient descent, optional coupled weight decay."""

    def __init__(self, tensors, lr, weight_decay=0.0):
        self.tensors = list(tensors)
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for t in self.tensors:
            if t.grad is None:
                continue
            g = t.grad
            if self.weight_decay:
                g = g + self.weight_decay * t.data
            t.data = t.data - lr * g

    def zero_grad(self):
        for t in self.tensors:
            t.grad = None


# ---------------------------------------------------------------------------
# metrics


def psnr(pred, target, peak=1.0):
    """10 log10(peak^2 / MSE); +inf for an exact match."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"psnr: shape mismatch {p.shape} vs {t.shape}")
    mse = float(np.mean((p - t) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def ssim3d(pred, target, peak=1.0, win=7):
    """Mean SSIM over all valid win^3 sliding windows, uniform weights.

    Population (biased) moments per window; C1 = (0.01 peak)^2,
    C2 = (0.03 peak)^2; result clamped to [-1, 1].
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"ssim3d: shape mismatch {p.shape} vs {t.shape}")
    if p.ndim != 3:
        raise ValueError(f"ssim3d: need 3-D volumes, got shape {p.shape}")
    if min(p.shape) < win:
        raise ValueError(f"ssim3d: volume {p.shape} smaller than window {win}")

    def wmean(a):
        return sliding_window_view(a, (win, win, win)).mean(axis=(3, 4, 5))

    mx = wmean(p)
    my = wmean(t)
    exx = wmean(p * p)
    eyy = wmean(t * t)
    exy = wmean(p * t)
    vx = exx - mx * mx
    vy = eyy - my * my
    cov = exy - mx * my
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    num = (2.0 * mx * my + c1) * (2.0 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.clip(np.mean(num / den), -1.0, 1.0))


# ---------------------------------------------------------------------------
# data


@dataclass
class Sample:
    vol: np.ndarray        # (n, n, n) float32
    drr_f: np.ndarray      # (n, n) float32
    drr_l: np.ndarray      # (n, n) float32
    seed: int


def make_dataset(cfg):
    """Deterministic phantom set split into (train, holdout) lists."""
    model = ProjectionModel(cfg.projection_model, cfg.mu)
    samples = []
    for i in range(cfg.data_count):
        seed = cfg.data_seed + i
        vol = make_phantom(random_spec(cfg.n, cfg.n_ellipsoids, seed,
                                       cfg.intensity_lo, cfg.intensity_hi))
        f = project_array(vol.data, View.FRONTAL, model)
        l = project_array(vol.data, View.LATERAL, model)
        samples.append(Sample(vol.data, f.astype(np.float32),
                              l.astype(np.float32), seed))
    cut = cfg.data_count - cfg.data_holdout
    return samples[:cut], samples[cut:]


def build_generator(cfg):
    if cfg.model_kind in ("ga", "baseline"):
        return gan.GeneratorGA(n=cfg.n, base_channels=cfg.base_channels,
                               lift_channels=cfg.lift_channels,
                               reduction=cfg.reduction, lambda_rec=cfg.lambda_rec,
                               attention=(cfg.model_kind == "ga"),
                               seed=cfg.model_seed)
    return gan.GeneratorVQ(n=cfg.n, base_channels=cfg.base_channels,
                           embed_dim=cfg.embed_dim, codebook_size=cfg.codebook_size,
                           beta=cfg.beta, seed=cfg.model_seed)


# ---------------------------------------------------------------------------
# training

# every step logs exactly these parts, in this order, so row count is
# always steps * len(METRIC_PARTS)
METRIC_PARTS = ("total_g", "recon", "proj", "perc", "adv_g", "vq",
                "attn_recon", "perplexity", "d_loss", "lr")


@dataclass
class TrainResult:
    checkpoint_path: str
    disc_checkpoint_path: str
    metrics_path: str
    steps: int
    last_parts: dict


def _fmt(v):
    return repr(float(v))


def write_metrics_csv(rows, path):
    lines = ["step,epoch,part,value"]
    for step, epoch, part, value in rows:
        lines.append(f"{step},{epoch},{part},{_fmt(value)}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def write_eval_csv(rows, path):
    lines = ["method,psnr_db,ssim,n"]
    for method, p, s, n in rows:
        lines.append(f"{method},{_fmt(p)},{_fmt(s)},{n}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _sample_losses(gen, disc, net, sample, cfg, proj_model):
    """Build one sample's loss graph; returns (total, parts dict, aux)."""
    dt = gen.store.tensors()[0].data.dtype
    xf = Tensor(sample.drr_f.astype(dt)[None])
    xl = Tensor(sample.drr_l.astype(dt)[None])
    out, aux = gen.forward(xf, xl)
    gt = Tensor(sample.vol.astype(dt)[None])

    recon = mse_loss(out, gt)
    proj = gan.projection_loss(out, sample.drr_f, sample.drr_l, proj_model)
    total = add(mul_scalar(recon, cfg.lambda_recon), mul_scalar(proj, cfg.lambda_proj))
    parts = {"recon": float(recon.data), "proj": float(proj.data),
             "perc": 0.0, "adv_g": 0.0, "vq": 0.0, "attn_recon": 0.0,
             "perplexity": 0.0}

    if cfg.lambda_perc > 0:
        perc = gan.perceptual_loss(out, sample.vol, net, cfg.perc_slices)
        total = add(total, mul_scalar(perc, cfg.lambda_perc))
        parts["perc"] = float(perc.data)
    if disc is not None:
        adv = gan.lsgan_g_loss(disc.forward(out))
        total = add(total, mul_scalar(adv, cfg.lambda_adv))
        parts["adv_g"] = float(adv.data)
    if aux["vq_loss"] is not None:
        total = add(total, mul_scalar(aux["vq_loss"], cfg.lambda_vq))
        parts["vq"] = float(aux["vq_loss"].data)
        parts["perplexity"] = float(aux["perplexity"])
    if aux["attn_recon"] is not None:
        # lambda_rec is applied inside the attention block
        total = add(total, aux["attn_recon"])
        parts["attn_recon"] = float(aux["attn_recon"].data)
    return total, parts, (out, aux)


def train(cfg, out_dir):
    """Train per cfg, write metrics.csv and checkpoints under out_dir."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    proj_model = ProjectionModel(cfg.projection_model, cfg.mu)

    with using_dtype(np.float32):
        gen = build_generator(cfg)
        disc = None
        opt_d = None
        if cfg.lambda_adv > 0:
            disc = gan.Discriminator3D(n=cfg.n, base_channels=cfg.base_channels,
                                       seed=cfg.model_seed + 1)
            opt_d = SGD(disc.store.tensors(), cfg.lr)
        net = gan.PerceptualNet(cfg.perc_channels, cfg.perc_seed) \
            if cfg.lambda_perc > 0 else None
        train_set, _ = make_dataset(cfg)
        opt_g = Adam(gen.store.tensors(), cfg.lr, weight_decay=cfg.weight_decay)

        rows = []
        step = 0
        last_parts = {}
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg.lr, cfg.decay_start, cfg.decay_gamma)
            order = np.random.default_rng((cfg.train_seed, epoch)).permutation(len(train_set))
            for start in range(0, len(order), cfg.batch):
                batch = [train_set[i] for i in order[start:start + cfg.batch]]
                step += 1

                # generator update
                opt_g.zero_grad()
                total = None
                acc = dict.fromkeys(
                    ("recon", "proj", "perc", "adv_g", "vq", "attn_recon",
                     "perplexity"), 0.0)
                fakes = []
                for s in batch:
                    t, parts, (out, aux) = _sample_losses(gen, disc, net, s, cfg, proj_model)
                    total = t if total is None else add(total, t)
                    for k in acc:
                        acc[k] += parts[k] / len(batch)
                    fakes.append(out.data.copy())
                    if aux["vq_indices"] is not None:
                        for idx in aux["vq_indices"]:
                            gen.codebook.note_usage(idx)
                total = mul_scalar(total, 1.0 / len(batch))
                g_value = float(total.data)
                if not np.isfinite(g_value):
                    raise TrainingDiverged(f"generator loss became {g_value} "
                                           f"at step {step}")
                total.backward()
                opt_g.step(lr)

                # discriminator update on detached fakes
                d_value = 0.0
                if disc is not None:
                    opt_d.zero_grad()
                    d_total = None
                    for s, fake in zip(batch, fakes):
                        dt = fake.dtype
                        real_scores = disc.forward(Tensor(s.vol.astype(dt)[None]))
                        fake_scores = disc.forward(Tensor(fake))
                        d = gan.lsgan_d_loss(real_scores, fake_scores)
                        d_total = d if d_total is None else add(d_total, d)
                    d_total = mul_scalar(d_total, 1.0 / len(batch))
                    d_value = float(d_total.data)
                    if not np.isfinite(d_value):
                        raise TrainingDiverged(f"discriminator loss became {d_value} "
                                               f"at step {step}")
                    d_total.backward()
                    opt_d.step(lr)

                last_parts = {"total_g": g_value, **acc, "d_loss": d_value, "lr": lr}
                for part in METRIC_PARTS:
                    rows.append((step, epoch, part, last_parts[part]))

            if cfg.checkpoint_interval and (epoch + 1) % cfg.checkpoint_interval == 0 \
                    and epoch + 1 < cfg.epochs:
                gan.save_checkpoint(gen, os.path.join(out_dir, f"ckpt_epoch{epoch + 1:04d}.bpct"))

        ckpt = os.path.join(out_dir, "ckpt_final.bpct")
        gan.save_checkpoint(gen, ckpt)
        disc_ckpt = ""
        if disc is not None:
            disc_ckpt = os.path.join(out_dir, "ckpt_final_disc.bpct")
            gan.save_checkpoint(disc, disc_ckpt)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        write_metrics_csv(rows, metrics_path)

    return TrainResult(checkpoint_path=ckpt, disc_checkpoint_path=disc_ckpt,
                       metrics_path=metrics_path, steps=step, last_parts=last_parts)


# ---------------------------------------------------------------------------
# inference and evaluation


def reconstruct(gen, drr_f, drr_l):
    """Run the generator on a tagged image pair; returns a CtVolume."""
    out, _ = gan.generator_forward(gen, drr_f, drr_l)
    return CtVolume(out.data.reshape(gen.n, gen.n, gen.n).astype(np.float32))


def evaluate(gen, samples, peak=1.0):
    """Mean PSNR/SSIM of reconstructions against ground truth.

    Returns (mean_psnr, mean_ssim, n, per_sample) where per_sample is a
    list of (psnr, ssim). The PSNR mean is +inf if any sample is exact.
    """
    if not samples:
        raise ValueError("evaluate: empty sample list")
    per = []
    for s in samples:
        rec = reconstruct(gen, DrrImage(s.drr_f, View.FRONTAL),
                          DrrImage(s.drr_l, View.LATERAL))
        per.append((psnr(rec.data, s.vol, peak), ssim3d(rec.data, s.vol, peak)))
    mean_p = float(np.mean([p for p, _ in per]))
    mean_s = float(np.mean([s_ for _, s_ in per]))
    return mean_p, mean_s, len(per), per


METHOD_NAMES = {"ga": "attn_gan", "baseline": "no_attn_baseline", "vq": "vq_gan"}


def method_name(kind):
    return METHOD_NAMES.get(kind, kind)
