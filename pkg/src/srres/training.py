"""Two-stage training: corruption (domain) learning, then SR learning.

Both loops are single-threaded and draw every random decision from one seeded
numpy generator, so fixed-seed runs are bit-identical and checkpoint/resume
reproduces an uninterrupted run exactly.  Checkpoints serialize all state
(weights, optimizer moments, RNG) as numpy trees via pickle, which keeps
save -> load -> save byte-stable.
"""

from __future__ import annotations

import csv
import pickle
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .imaging import SamplePair, estimate_noise_sigma, flip_rotate
from .losses import (
    DomainLossTerms,
    FeatureExtractor,
    LossWeights,
    SRLossTerms,
    color_loss,
    domain_composite_loss,
    gaussian_highpass,
    l1_loss,
    perceptual_loss,
    ragan_discriminator_loss,
    ragan_generator_loss,
    sr_composite_loss,
    tv_loss,
)
from .networks import (
    DiscriminatorConfig,
    DomainGenerator,
    DomainGeneratorConfig,
    GeneratorSR,
    GeneratorSRConfig,
    HRDiscriminator,
    PatchDiscriminator,
    gd_forward,
)
from .variational import downscale

CHECKPOINT_VERSION = 1
SR_LR_DROPS = (5000, 10000, 20000, 30000)


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the last good checkpoint."""

    def __init__(self, message: str, checkpoint: "Checkpoint"):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Stage-tagged hyperparameters; use the stage factories for defaults."""

    stage: str
    scale: int = 4
    seed: int = 0
    batch_size: int = 16
    # sr stage
    lr_patch: int = 32
    total_iters: int = 51000
    # domain stage (hr crops are scale * src_crop)
    src_crop: int = 128
    total_epochs: int = 300
    # optimizer
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    base_lr: float = 1e-4
    # losses
    weights: LossWeights = field(default_factory=LossWeights)
    # augmentation
    aug_flip: bool = True
    aug_rot90: bool = True
    mixup: bool = True
    mixup_alpha: float = 0.2
    mixup_prob: float = 0.5
    # architecture
    gsr_features: int = 64
    gsr_kernel: int = 5
    gsr_blocks: int = 5
    gd_features: int = 64
    gd_blocks: int = 8
    disc_base: int = 64
    dx_highpass: bool = False
    # bookkeeping
    checkpoint_every: int = 1000
    keep_checkpoints: int = 3
    extractor_seed: int = 0

    def __post_init__(self):
        if self.stage not in ("domain", "sr"):
            raise ValueError(f"stage must be 'domain' or 'sr', got {self.stage!r}")
        positive = (
            "scale", "batch_size", "lr_patch", "total_iters", "src_crop",
            "total_epochs", "base_lr", "gsr_features", "gsr_kernel", "gsr_blocks",
            "gd_features", "gd_blocks", "disc_base", "checkpoint_every",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    @classmethod
    def sr_defaults(cls, **overrides) -> "TrainConfig":
        base = dict(stage="sr", batch_size=16, lr_patch=32, total_iters=51000,
                    beta1=0.9, beta2=0.999, adam_eps=1e-8, base_lr=1e-4)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def domain_defaults(cls, **overrides) -> "TrainConfig":
        base = dict(stage="domain", batch_size=16, src_crop=128, total_epochs=300,
                    beta1=0.5, beta2=0.999, adam_eps=1e-8, base_lr=2e-4)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def sr_desk_preset(cls, **overrides) -> "TrainConfig":
        """Shrunken CPU-friendly setup used by the smoke experiments."""
        base = dict(total_iters=200, batch_size=4, lr_patch=16, scale=2,
                    gsr_features=32, gsr_blocks=2, base_lr=5e-3,
                    checkpoint_every=50, mixup=False,
                    weights=LossWeights(w_per=1.0, w_gan=0.0, w_tv=1.0, w_l1=10.0))
        base.update(overrides)
        return cls.sr_defaults(**base)


def config_to_dict(cfg: TrainConfig) -> dict:
    """Flatten a TrainConfig (loss weights inlined) into plain key/values."""
    d = asdict(cfg)
    d.update(d.pop("weights"))
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    w_fields = {f.name for f in fields(LossWeights)}
    weights = LossWeights(**{k: d.pop(k) for k in list(d) if k in w_fields})
    return TrainConfig(weights=weights, **d)


# ---------------------------------------------------------------------------
# Learning-rate schedules
# ---------------------------------------------------------------------------

def lr_schedule_sr(base_lr: float, iteration: int) -> float:
    """Halve at 5K, 10K, 20K and 30K iterations."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    halvings = sum(1 for t in SR_LR_DROPS if t <= iteration)
    return base_lr * 0.5 ** halvings


def lr_schedule_domain(base_lr: float, epoch: int, total: int = 300, decay_start: int = 150) -> float:
    """Constant for the first `decay_start` epochs, then linear decay to zero."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if epoch > total:
        raise ValueError(f"epoch {epoch} exceeds total {total}")
    if epoch < decay_start or total <= decay_start:
        return base_lr
    return base_lr * ((total - epoch) / (total - decay_start))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    stage: str
    progress: int  # completed iterations (sr) or epochs (domain)
    config: dict
    weights: dict
    optimizers: dict
    rng: dict
    version: int = CHECKPOINT_VERSION


def _tree_to_numpy(obj):
    if torch.is_tensor(obj):
        return obj.detach().cpu().numpy()
    if isinstance(obj, dict):
        return {k: _tree_to_numpy(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        t = [_tree_to_numpy(v) for v in obj]
        return t if isinstance(obj, list) else tuple(t)
    return obj


def _tree_to_torch(obj):
    if isinstance(obj, np.ndarray):
        return torch.as_tensor(obj)
    if isinstance(obj, dict):
        return {k: _tree_to_torch(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        t = [_tree_to_torch(v) for v in obj]
        return t if isinstance(obj, list) else tuple(t)
    return obj


def _canonical(obj):
    # Intern strings so pickle memoization is identical whether the tree was
    # built from source literals or loaded from an earlier file; this keeps
    # save -> load -> save byte-stable.
    if isinstance(obj, str):
        return sys.intern(obj)
    if isinstance(obj, dict):
        return {_canonical(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_canonical(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_canonical(v) for v in obj)
    return obj


def save_checkpoint(ck: Checkpoint, path) -> None:
    payload = _canonical({
        "format_version": ck.version,
        "stage": ck.stage,
        "progress": ck.progress,
        "config": ck.config,
        "weights": ck.weights,
        "optimizers": ck.optimizers,
        "rng": ck.rng,
    })
    Path(path).write_bytes(pickle.dumps(payload, protocol=4))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    try:
        payload = pickle.loads(raw)
        version = payload["format_version"]
    except Exception as exc:
        raise ValueError(f"corrupt checkpoint file {path}: {exc}") from exc
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version {version} in {path} != supported {CHECKPOINT_VERSION}"
        )
    return Checkpoint(
        stage=payload["stage"],
        progress=payload["progress"],
        config=payload["config"],
        weights=payload["weights"],
        optimizers=payload["optimizers"],
        rng=payload["rng"],
        version=version,
    )


def _capture(stage, progress, cfg, modules: dict, optimizers: dict, rng) -> Checkpoint:
    return Checkpoint(
        stage=stage,
        progress=progress,
        config=config_to_dict(cfg),
        weights={name: _tree_to_numpy(m.state_dict()) for name, m in modules.items() if m is not None},
        optimizers={name: _tree_to_numpy(o.state_dict()) for name, o in optimizers.items() if o is not None},
        rng={"numpy": rng.bit_generator.state},
    )


def _restore(ck: Checkpoint, modules: dict, optimizers: dict, rng) -> int:
    for name, module in modules.items():
        if module is not None and name in ck.weights:
            module.load_state_dict(_tree_to_torch(ck.weights[name]))
    for name, opt in optimizers.items():
        if opt is not None and name in ck.optimizers:
            opt.load_state_dict(_tree_to_torch(ck.optimizers[name]))
    rng.bit_generator.state = ck.rng["numpy"]
    return ck.progress


def _rolling_save(ck: Checkpoint, out_dir: Path, tag: str, keep: int):
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ck, out_dir / f"ckpt-{tag}-{ck.progress:07d}.pkl")
    existing = sorted(out_dir.glob(f"ckpt-{tag}-*.pkl"))
    for old in existing[:-keep]:
        old.unlink()


def _write_trace(rows, header, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _f(value) -> float:
    return float(value.detach()) if torch.is_tensor(value) else float(value)


def _set_lr(optimizer, lr):
    if optimizer is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr


# ---------------------------------------------------------------------------
# Network (re)construction from configs and checkpoints
# ---------------------------------------------------------------------------

def build_sr_generator(cfg: TrainConfig, channels: int) -> GeneratorSR:
    gcfg = GeneratorSRConfig(
        scale=cfg.scale, channels=channels, features=cfg.gsr_features,
        kernel_size=cfg.gsr_kernel, num_blocks=cfg.gsr_blocks,
    )
    return GeneratorSR(gcfg, seed=cfg.seed)


def build_domain_generator(cfg: TrainConfig, channels: int) -> DomainGenerator:
    gcfg = DomainGeneratorConfig(
        channels=channels, features=cfg.gd_features, num_blocks=cfg.gd_blocks,
    )
    return DomainGenerator(gcfg, seed=cfg.seed)


def load_sr_generator(ck: Checkpoint, channels: int = 3) -> GeneratorSR:
    if ck.stage != "sr":
        raise ValueError(f"expected an sr checkpoint, got stage {ck.stage!r}")
    model = build_sr_generator(config_from_dict(ck.config), channels)
    model.load_state_dict(_tree_to_torch(ck.weights["generator"]))
    model.eval()
    return model


def load_domain_generator(ck: Checkpoint, channels: int = 3) -> DomainGenerator:
    if ck.stage != "domain":
        raise ValueError(f"expected a domain checkpoint, got stage {ck.stage!r}")
    model = build_domain_generator(config_from_dict(ck.config), channels)
    model.load_state_dict(_tree_to_torch(ck.weights["generator"]))
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Batch sampling
# ---------------------------------------------------------------------------

def _allowed_transforms(cfg: TrainConfig):
    if cfg.aug_flip and cfg.aug_rot90:
        return tuple(range(8))
    if cfg.aug_rot90:
        return (0, 1, 2, 3)
    if cfg.aug_flip:
        return (0, 4)
    return (0,)


def _sample_sr_batch(cfg: TrainConfig, pairs, rng):
    s, p = cfg.scale, cfg.lr_patch
    allowed = _allowed_transforms(cfg)
    lr_list, hr_list = [], []
    idx = rng.integers(0, len(pairs), size=cfg.batch_size)
    for i in idx:
        pair = pairs[int(i)]
        h, w = pair.lr.shape[1:]
        top = int(rng.integers(0, h - p + 1))
        left = int(rng.integers(0, w - p + 1))
        lr_patch = pair.lr[:, top : top + p, left : left + p]
        hr_patch = pair.hr[:, s * top : s * (top + p), s * left : s * (left + p)]
        t = allowed[int(rng.integers(0, len(allowed)))]
        lr_list.append(flip_rotate(lr_patch, t))
        hr_list.append(flip_rotate(hr_patch, t))
    lr_b = np.stack(lr_list)
    hr_b = np.stack(hr_list)
    if cfg.mixup and rng.random() < cfg.mixup_prob:
        lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
        perm = rng.permutation(cfg.batch_size)
        lr_b = lam * lr_b + (1.0 - lam) * lr_b[perm]
        hr_b = lam * hr_b + (1.0 - lam) * hr_b[perm]
    return lr_b, hr_b


def _random_crop(img, size, rng):
    h, w = img.shape[1:]
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds image dims {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return img[:, top : top + size, left : left + size]


# ---------------------------------------------------------------------------
# Stage 1: domain (corruption) learning
# ---------------------------------------------------------------------------

def train_domain(cfg: TrainConfig, source_images, target_images, out_dir=None,
                 step_callback=None) -> Checkpoint:
    """Adversarially fit the corruption generator on unpaired source/target data.

    Target HR images are cropped at scale*src_crop and bicubically downscaled
    to form the clean inputs z; the patch critic compares generated outputs
    against src_crop-sized source-domain crops.
    """
    if cfg.stage != "domain":
        raise ValueError(f"train_domain needs a 'domain' config, got {cfg.stage!r}")
    if not source_images or not target_images:
        raise ValueError("source and target image lists must be non-empty")
    channels = target_images[0].shape[0]
    hr_crop = cfg.scale * cfg.src_crop
    for img in target_images:
        if min(img.shape[1:]) < hr_crop:
            raise ValueError(f"target image {img.shape[1:]} smaller than hr crop {hr_crop}")
    for img in source_images:
        if min(img.shape[1:]) < cfg.src_crop:
            raise ValueError(f"source image {img.shape[1:]} smaller than crop {cfg.src_crop}")

    gen = build_domain_generator(cfg, channels)
    use_disc = cfg.weights.w_tex > 0
    disc = (
        PatchDiscriminator(
            DiscriminatorConfig(variant="patch_discriminator", channels=channels, base=cfg.disc_base),
            seed=cfg.seed + 1,
        )
        if use_disc
        else None
    )
    extractor = FeatureExtractor(channels=channels, seed=cfg.extractor_seed) if cfg.weights.w_per_d > 0 else None
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    opt_d = (
        torch.optim.Adam(disc.parameters(), lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
        if disc
        else None
    )
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    modules = {"generator": gen, "discriminator": disc}
    optimizers = {"generator": opt_g, "discriminator": opt_d}

    steps_per_epoch = max(1, len(target_images) // cfg.batch_size)
    trace = []
    out_dir = Path(out_dir) if out_dir is not None else None
    gen.train()
    if disc:
        disc.train()
    last_good = _capture("domain", 0, cfg, modules, optimizers, rng)
    for epoch in range(cfg.total_epochs):
        lr_now = lr_schedule_domain(cfg.base_lr, epoch, cfg.total_epochs)
        _set_lr(opt_g, lr_now)
        _set_lr(opt_d, lr_now)
        # one shuffled pass over the target set per epoch
        need = steps_per_epoch * cfg.batch_size
        order = np.concatenate([
            rng.permutation(len(target_images))
            for _ in range((need - 1) // len(target_images) + 1)
        ])[:need]
        for step in range(steps_per_epoch):
            picks = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            z_np = np.stack([
                np.clip(
                    downscale(_random_crop(target_images[int(i)], hr_crop, rng), cfg.scale),
                    0.0, 1.0,
                )
                for i in picks
            ])
            x_np = np.stack([
                _random_crop(source_images[int(i)], cfg.src_crop, rng)
                for i in rng.integers(0, len(source_images), size=cfg.batch_size)
            ])
            z = torch.as_tensor(z_np, dtype=torch.float32)
            x = torch.as_tensor(x_np, dtype=torch.float32)

            d_loss_val = 0.0
            if disc:
                with torch.no_grad():
                    fake = gen(z)
                real_in = gaussian_highpass(x) if cfg.dx_highpass else x
                fake_in = gaussian_highpass(fake) if cfg.dx_highpass else fake
                d_loss = ragan_discriminator_loss(disc(real_in), disc(fake_in))
                opt_d.zero_grad()
                d_loss.backward()
                opt_d.step()
                d_loss_val = _f(d_loss)

            fake = gen(z)
            terms = DomainLossTerms(
                color=color_loss(fake, z),
                tex=(
                    ragan_generator_loss(
                        disc(gaussian_highpass(x) if cfg.dx_highpass else x),
                        disc(gaussian_highpass(fake) if cfg.dx_highpass else fake),
                    )
                    if disc
                    else fake.new_zeros(())
                ),
                per=perceptual_loss(extractor, fake, z) if extractor else fake.new_zeros(()),
            )
            try:
                g_loss = domain_composite_loss(cfg.weights, terms)
                if not torch.isfinite(g_loss):
                    raise ValueError("total loss is non-finite")
            except ValueError as exc:
                if out_dir is not None:
                    _rolling_save(last_good, out_dir, "domain", cfg.keep_checkpoints)
                raise TrainingDiverged(
                    f"aborting at epoch {epoch} step {step}: {exc}", last_good
                ) from exc
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()
            trace.append([
                epoch + 1, step + 1, _f(terms.color), _f(terms.tex),
                _f(terms.per), _f(g_loss), d_loss_val, lr_now,
            ])
            if step_callback is not None:
                step_callback(epoch + 1, step + 1, gen, _f(g_loss))
        last_good = _capture("domain", epoch + 1, cfg, modules, optimizers, rng)
        if out_dir is not None:
            _rolling_save(last_good, out_dir, "domain", cfg.keep_checkpoints)
    if out_dir is not None:
        _write_trace(
            trace,
            ["epoch", "step", "color", "texture", "perceptual", "total", "d_loss", "lr"],
            out_dir / "trace-domain.csv",
        )
    return last_good


def generate_lr_dataset(ck: Checkpoint, hr_images, scale: int) -> list:
    """Pair every HR image with the learned corruption of its bicubic downscale."""
    cfg = config_from_dict(ck.config)
    if cfg.scale != scale:
        raise ValueError(f"checkpoint was trained at scale {cfg.scale}, requested {scale}")
    if not hr_images:
        raise ValueError("no HR images supplied")
    gen = load_domain_generator(ck, channels=hr_images[0].shape[0])
    pairs = []
    for hr in hr_images:
        if hr.shape[1] % scale or hr.shape[2] % scale:
            raise ValueError(f"HR dims {hr.shape[1:]} not divisible by scale {scale}")
        z = np.clip(downscale(hr, scale), 0.0, 1.0)
        pairs.append(SamplePair(lr=gd_forward(gen, z), hr=hr.copy()).check(scale))
    return pairs


# ---------------------------------------------------------------------------
# Stage 2: SR learning
# ---------------------------------------------------------------------------

def train_sr(cfg: TrainConfig, pairs, out_dir=None, resume_from=None,
             step_callback=None) -> Checkpoint:
    """Adversarial SR training on generated (or synthetic) LR/HR pairs.

    Per batch: seeded patch sampling, dihedral augmentation, optional mixup,
    per-patch noise estimation feeding the projection layer, one critic step
    then one generator step.  The constrained encoder/decoder kernels are
    reparametrized inside the forward pass, so the zero-mean/unit-norm
    invariants hold after every optimizer step by construction.
    """
    if cfg.stage != "sr":
        raise ValueError(f"train_sr needs an 'sr' config, got {cfg.stage!r}")
    if not pairs:
        raise ValueError("no training pairs supplied")
    for pair in pairs:
        pair.check(cfg.scale)
        if min(pair.lr.shape[1:]) < cfg.lr_patch:
            raise ValueError(
                f"lr image {pair.lr.shape[1:]} smaller than patch size {cfg.lr_patch}"
            )
    channels = pairs[0].hr.shape[0]

    gen = build_sr_generator(cfg, channels)
    use_disc = cfg.weights.w_gan > 0
    disc = (
        HRDiscriminator(
            DiscriminatorConfig(
                variant="hr_discriminator", channels=channels, base=cfg.disc_base,
                patch=cfg.scale * cfg.lr_patch,
            ),
            seed=cfg.seed + 1,
        )
        if use_disc
        else None
    )
    extractor = FeatureExtractor(channels=channels, seed=cfg.extractor_seed) if cfg.weights.w_per > 0 else None
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    opt_d = (
        torch.optim.Adam(disc.parameters(), lr=cfg.base_lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
        if disc
        else None
    )
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    modules = {"generator": gen, "discriminator": disc}
    optimizers = {"generator": opt_g, "discriminator": opt_d}

    start = 0
    if resume_from is not None:
        if resume_from.stage != "sr":
            raise ValueError(f"cannot resume sr training from a {resume_from.stage!r} checkpoint")
        start = _restore(resume_from, modules, optimizers, rng)
    gen.train()
    if disc:
        disc.train()

    trace = []
    out_dir = Path(out_dir) if out_dir is not None else None
    last_good = _capture("sr", start, cfg, modules, optimizers, rng)
    for it in range(start + 1, cfg.total_iters + 1):
        lr_now = lr_schedule_sr(cfg.base_lr, it)
        _set_lr(opt_g, lr_now)
        _set_lr(opt_d, lr_now)
        lr_np, hr_np = _sample_sr_batch(cfg, pairs, rng)
        sigmas = np.array([estimate_noise_sigma(patch) for patch in lr_np])
        lr_b = torch.as_tensor(lr_np, dtype=torch.float32)
        hr_b = torch.as_tensor(hr_np, dtype=torch.float32)
        sig_b = torch.as_tensor(sigmas, dtype=torch.float32)

        d_loss_val = 0.0
        if disc:
            with torch.no_grad():
                fake = gen(lr_b, sig_b)
            real_in = gaussian_highpass(hr_b) if cfg.weights.highpass_gan else hr_b
            fake_in = gaussian_highpass(fake) if cfg.weights.highpass_gan else fake
            d_loss = ragan_discriminator_loss(disc(real_in), disc(fake_in))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            d_loss_val = _f(d_loss)

        fake = gen(lr_b, sig_b)
        if disc:
            real_in = gaussian_highpass(hr_b) if cfg.weights.highpass_gan else hr_b
            fake_in = gaussian_highpass(fake) if cfg.weights.highpass_gan else fake
            gan_term = ragan_generator_loss(disc(real_in), disc(fake_in))
        else:
            gan_term = fake.new_zeros(())
        terms = SRLossTerms(
            per=perceptual_loss(extractor, fake, hr_b) if extractor else fake.new_zeros(()),
            gan=gan_term,
            tv=tv_loss(fake, hr_b),
            l1=l1_loss(fake, hr_b),
        )
        try:
            g_loss = sr_composite_loss(cfg.weights, terms)
            if not torch.isfinite(g_loss):
                raise ValueError("total loss is non-finite")
        except ValueError as exc:
            if out_dir is not None:
                _rolling_save(last_good, out_dir, "sr", cfg.keep_checkpoints)
            raise TrainingDiverged(f"aborting at iteration {it}: {exc}", last_good) from exc
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        trace.append([
            it, _f(terms.per), _f(terms.gan), _f(terms.tv), _f(terms.l1),
            _f(g_loss), d_loss_val, lr_now,
        ])
        if step_callback is not None:
            step_callback(it, gen, {
                "per": _f(terms.per), "gan": _f(terms.gan),
                "tv": _f(terms.tv), "l1": _f(terms.l1), "total": _f(g_loss),
            })
        if it % cfg.checkpoint_every == 0:
            last_good = _capture("sr", it, cfg, modules, optimizers, rng)
            if out_dir is not None:
                _rolling_save(last_good, out_dir, "sr", cfg.keep_checkpoints)
    final = (
        last_good
        if last_good.progress == cfg.total_iters
        else _capture("sr", cfg.total_iters, cfg, modules, optimizers, rng)
    )
    if out_dir is not None:
        _rolling_save(final, out_dir, "sr", cfg.keep_checkpoints)
        _write_trace(
            trace,
            ["iteration", "perceptual", "gan", "tv", "l1", "total", "d_loss", "lr"],
            out_dir / "trace-sr.csv",
        )
    return final
