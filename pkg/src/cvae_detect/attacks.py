"""Random, grey-box, and detector-aware perturbation generators.

All attacks return an AttackResult whose adversarial batch stays inside the
[0, 1] pixel box and, when a finite budget applies, inside the eps-ball of the
original batch. Attacks never mutate their inputs and are deterministic given
(inputs, parameters, seed).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import NUM_CLASSES
from .errors import NumericError
from .models import classifier_predict

ATTACK_KINDS = ("random", "fgsm", "rfgsm", "pgd", "cw", "deepfool", "whitebox_pgd")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class CwParams:
    c_init: float = 1e-2
    binary_search_steps: int = 5
    max_iter: int = 1000
    lr: float = 0.01
    confidence: float = 0.0


@dataclass
class DfParams:
    overshoot: float = 0.02
    max_iter: int = 50


@dataclass
class AttackConfig:
    """Declarative description of one attack run; serializes to/from JSON."""

    kind: str
    norm: str = "linf"
    eps_atk: float = 0.0
    eps_rand: float = 0.0
    alpha: float | None = None
    n: int | None = None
    sigma: float = 0.0
    cw_params: CwParams = field(default_factory=CwParams)
    df_params: DfParams = field(default_factory=DfParams)
    target_policy: str = "untargeted"
    seed: int = 0
    id: str | None = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}, expected one of {ATTACK_KINDS}")
        if self.norm not in ("l2", "linf"):
            raise ValueError(f"norm must be 'l2' or 'linf', got {self.norm!r}")
        if self.eps_atk < 0:
            raise ValueError(f"eps_atk must be >= 0, got {self.eps_atk}")
        if self.kind != "whitebox_pgd" and self.sigma != 0.0:
            raise ValueError("sigma is only defined for whitebox_pgd")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError(f"sigma must be in [0, 1], got {self.sigma}")
        if self.target_policy not in ("untargeted", "random_other_class"):
            raise ValueError(f"unknown target_policy {self.target_policy!r}")
        if self.id is None:
            self.id = self.kind if self.eps_atk == 0 else f"{self.kind}_{self.norm}_{self.eps_atk:g}"

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if "cw_params" in d:
            d["cw_params"] = CwParams(**d["cw_params"])
        if "df_params" in d:
            d["df_params"] = DfParams(**d["df_params"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def default_iterations(eps: float, alpha: float) -> int:
    """PGD iteration count when unset: floor(2 * eps / alpha) + 2."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return int(math.floor(2.0 * eps / alpha)) + 2


# ---------------------------------------------------------------------------
# result container
# ---------------------------------------------------------------------------


@dataclass
class AttackResult:
    x_adv: torch.Tensor
    success: torch.Tensor  # bool (n,)
    norms: torch.Tensor  # float (n,), perturbation size in the attack norm
    y_target: torch.Tensor | None = None

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        payload = {"x_adv": self.x_adv, "success": self.success, "norms": self.norms}
        if self.y_target is not None:
            payload["y_target"] = self.y_target
        torch.save(payload, directory / "x_adv.pt")
        with open(directory / "result.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", "perturbation_norm", "success"])
            for i, (nrm, ok) in enumerate(zip(self.norms.tolist(), self.success.tolist())):
                writer.writerow([i, f"{nrm:.8g}", int(ok)])

    @classmethod
    def load(cls, directory) -> "AttackResult":
        payload = torch.load(Path(directory) / "x_adv.pt", weights_only=False)
        return cls(
            payload["x_adv"], payload["success"], payload["norms"], payload.get("y_target")
        )


def perturbation_norm(x_adv, x, norm: str) -> torch.Tensor:
    delta = (x_adv - x).flatten(1)
    if norm == "linf":
        return delta.abs().max(dim=1).values
    return delta.norm(p=2, dim=1)


def _finish(model, x_adv, x, y, norm, y_target=None) -> AttackResult:
    """Compute the success mask and per-sample norms for a finished attack."""
    pred = classifier_predict(model, x_adv)
    if y_target is None:
        success = pred != y
    else:
        success = pred == y_target
    return AttackResult(x_adv.detach(), success, perturbation_norm(x_adv, x, norm), y_target)


# ---------------------------------------------------------------------------
# shared numerics
# ---------------------------------------------------------------------------


def clip_to_ball(x_adv, x, eps, norm: str) -> torch.Tensor:
    """Project x_adv into the eps-ball around x, then clamp to the [0,1] box."""
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if x_adv.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(x_adv.shape)} vs {tuple(x.shape)}")
    if norm == "linf":
        x_adv = torch.max(torch.min(x_adv, x + eps), x - eps)
    elif norm == "l2":
        delta = x_adv - x
        norms = delta.flatten(1).norm(p=2, dim=1)
        scale = torch.where(norms > eps, eps / norms.clamp(min=1e-12), torch.ones_like(norms))
        x_adv = x + delta * scale.view(-1, *([1] * (x.ndim - 1)))
    else:
        raise ValueError(f"norm must be 'l2' or 'linf', got {norm!r}")
    return x_adv.clamp(0.0, 1.0)


def input_gradient(loss_fn, x) -> torch.Tensor:
    """Exact gradient of the scalar loss_fn(x) with respect to every pixel."""
    x_req = x.detach().clone().requires_grad_(True)
    loss = loss_fn(x_req)
    (grad,) = torch.autograd.grad(loss, x_req)
    if not torch.isfinite(grad).all():
        raise NumericError("input gradient contains NaN/Inf")
    return grad


def _classifier_grad(model, x, y) -> torch.Tensor:
    """Gradient of the summed cross-entropy loss; sum keeps per-sample grads unscaled."""
    model.eval()
    return input_gradient(lambda inp: F.cross_entropy(model(inp), y, reduction="sum"), x)


def _uniform_noise(shape, eps, generator):
    u = torch.rand(shape, generator=generator)
    return (u * 2.0 - 1.0) * eps


# ---------------------------------------------------------------------------
# attacks
# ---------------------------------------------------------------------------


def attack_random(model, x, y, eps, seed=0) -> AttackResult:
    """Unbiased uniform noise in [-eps, eps] per pixel, clamped to [0, 1]."""
    gen = torch.Generator().manual_seed(seed)
    x_adv = (x + _uniform_noise(x.shape, eps, gen)).clamp(0.0, 1.0)
    return _finish(model, x_adv, x, y, "linf")


def attack_fgsm(model, x, y, eps, norm="linf") -> AttackResult:
    """Single step in the direction of the loss gradient.

    linf: x + eps * sign(grad); l2: x + eps * grad / ||grad||_2 per sample.
    Samples with zero l2 gradient norm are left unperturbed.
    """
    grad = _classifier_grad(model, x, y)
    if norm == "linf":
        x_adv = x + eps * grad.sign()
    elif norm == "l2":
        gnorm = grad.flatten(1).norm(p=2, dim=1)
        scale = torch.where(gnorm > 0, eps / gnorm.clamp(min=1e-20), torch.zeros_like(gnorm))
        x_adv = x + grad * scale.view(-1, *([1] * (x.ndim - 1)))
    else:
        raise ValueError(f"norm must be 'l2' or 'linf', got {norm!r}")
    return _finish(model, x_adv.clamp(0.0, 1.0), x, y, norm)


def attack_rfgsm(model, x, y, eps_rand, eps, norm="linf", seed=0) -> AttackResult:
    """Uniform random start of radius eps_rand, one FGSM step, eps-ball clip."""
    gen = torch.Generator().manual_seed(seed)
    x_start = (x + _uniform_noise(x.shape, eps_rand, gen)).clamp(0.0, 1.0)
    grad = _classifier_grad(model, x_start, y)
    if norm == "linf":
        x_adv = x_start + eps * grad.sign()
    elif norm == "l2":
        gnorm = grad.flatten(1).norm(p=2, dim=1)
        scale = torch.where(gnorm > 0, eps / gnorm.clamp(min=1e-20), torch.zeros_like(gnorm))
        x_adv = x_start + grad * scale.view(-1, *([1] * (x.ndim - 1)))
    else:
        raise ValueError(f"norm must be 'l2' or 'linf', got {norm!r}")
    return _finish(model, clip_to_ball(x_adv, x, eps, norm), x, y, norm)


def attack_pgd(model, x, y, eps, alpha, steps=None, y_target=None) -> AttackResult:
    """Iterated signed-gradient steps, each projected into the linf eps-ball.

    Untargeted (default): ascent on the true-label loss. With y_target set:
    descent on the target-label loss, success = hitting the target.
    """
    if steps is None:
        steps = default_iterations(eps, alpha)
    x_adv = x.clone()
    for _ in range(steps):
        if y_target is None:
            grad = _classifier_grad(model, x_adv, y)
            x_adv = x_adv + alpha * grad.sign()
        else:
            grad = _classifier_grad(model, x_adv, y_target)
            x_adv = x_adv - alpha * grad.sign()
        x_adv = clip_to_ball(x_adv, x, eps, "linf")
    return _finish(model, x_adv, x, y, "linf", y_target)


def _cw_margin(logits, y, confidence):
    """Untargeted CW objective: max(Z_y - max_{i != y} Z_i + kappa, 0)."""
    z_y = logits.gather(1, y[:, None]).squeeze(1)
    masked = logits.clone()
    masked.scatter_(1, y[:, None], float("-inf"))
    z_other = masked.max(dim=1).values
    return torch.clamp(z_y - z_other + confidence, min=0.0)


def attack_cw(model, x, y, params: CwParams | None = None) -> AttackResult:
    """Carlini-Wagner l2: minimize ||delta||^2 + c * margin in tanh space.

    c is tuned per sample by binary search; the tanh change of variables keeps
    pixels inside (0, 1), so only the box constraint applies (no eps-ball).
    Samples with no adversary found are returned unperturbed and unsuccessful.
    """
    params = params or CwParams()
    model.eval()
    n = len(x)
    # atanh is singular at +-1; shrink slightly before changing variables
    w_orig = torch.atanh((x * 2.0 - 1.0) * (1.0 - 1e-6))

    lower = torch.zeros(n)
    upper = torch.full((n,), 1e10)
    c = torch.full((n,), params.c_init)
    best_adv = x.clone()
    best_l2 = torch.full((n,), float("inf"))
    ever_success = torch.zeros(n, dtype=torch.bool)

    for _ in range(params.binary_search_steps):
        w = w_orig.clone().requires_grad_(True)
        opt = torch.optim.Adam([w], lr=params.lr)
        success_at_c = torch.zeros(n, dtype=torch.bool)
        for _ in range(params.max_iter):
            x_adv = (torch.tanh(w) + 1.0) / 2.0
            l2sq = (x_adv - x).flatten(1).pow(2).sum(dim=1)
            logits = model(x_adv)
            margin = _cw_margin(logits, y, params.confidence)
            loss = (l2sq + c * margin).sum()
            if not torch.isfinite(loss):
                raise NumericError("CW objective became non-finite")
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                pred = logits.argmax(dim=1)
                adv_now = (pred != y) & (margin <= 0)
                l2_now = l2sq.sqrt()
                better = adv_now & (l2_now < best_l2)
                if better.any():
                    best_adv[better] = x_adv.detach()[better]
                    best_l2[better] = l2_now[better]
                success_at_c |= adv_now
        ever_success |= success_at_c
        # successful c can shrink; unsuccessful c grows (x10 until bracketed)
        upper = torch.where(success_at_c, torch.minimum(upper, c), upper)
        lower = torch.where(~success_at_c, torch.maximum(lower, c), lower)
        c = torch.where(upper < 1e10, (lower + upper) / 2.0, c * 10.0)

    return _finish(model, best_adv, x, y, "l2")


def attack_deepfool(model, x, params: DfParams | None = None, y=None,
                    num_classes=NUM_CLASSES) -> AttackResult:
    """Iterative minimal-l2 projection onto the linearized decision boundary.

    Stops per sample as soon as its label flips away from the original
    prediction, or after max_iter. When true labels are supplied, samples the
    model already misclassifies are returned unperturbed immediately.
    """
    params = params or DfParams()
    model.eval()
    n = len(x)
    pred0 = classifier_predict(model, x)
    x_adv = x.clone()
    r_tot = torch.zeros_like(x)
    active = torch.ones(n, dtype=torch.bool)
    if y is not None:
        active &= pred0 == y

    for _ in range(params.max_iter):
        idx = active.nonzero(as_tuple=True)[0]
        if len(idx) == 0:
            break
        sub = x_adv[idx].detach().clone().requires_grad_(True)
        logits = model(sub)
        grads = []
        for k in range(num_classes):
            (g,) = torch.autograd.grad(
                logits[:, k].sum(), sub, retain_graph=k < num_classes - 1
            )
            grads.append(g)
        grads = torch.stack(grads)  # (K, m, c, h, w)
        m = len(idx)
        k0 = pred0[idx]
        f = logits.detach()
        f0 = f.gather(1, k0[:, None]).squeeze(1)
        g0 = grads[k0, torch.arange(m)]
        w = grads - g0[None]  # (K, m, ...)
        f_diff = (f - f0[:, None]).T  # (K, m)
        w_norm = w.flatten(2).norm(p=2, dim=2)  # (K, m)
        ratio = f_diff.abs() / w_norm.clamp(min=1e-12)
        ratio[k0, torch.arange(m)] = float("inf")
        l_star = ratio.argmin(dim=0)
        sel = torch.arange(m)
        w_l = w[l_star, sel]
        step = (f_diff[l_star, sel].abs() / w_norm[l_star, sel].pow(2).clamp(min=1e-24))
        r = step.view(-1, *([1] * (x.ndim - 1))) * w_l
        r_tot[idx] = r_tot[idx] + r
        x_adv = (x + (1.0 + params.overshoot) * r_tot).clamp(0.0, 1.0)
        with torch.no_grad():
            flipped = classifier_predict(model, x_adv[idx]) != k0
        active[idx] = ~flipped

    return _finish(model, x_adv, x, y if y is not None else pred0, "l2")


def draw_targets(y_true, seed, num_classes=NUM_CLASSES) -> torch.Tensor:
    """Uniform target class per sample, excluding the true class."""
    gen = torch.Generator().manual_seed(seed)
    offsets = torch.randint(1, num_classes, y_true.shape, generator=gen)
    return (y_true + offsets) % num_classes


def attack_whitebox_pgd(cls_model, cvae_model, x, y_true, eps, alpha, steps=None,
                        sigma=0.0, seed=0, eps_rand=0.0, y_target=None) -> AttackResult:
    """Detector-aware targeted PGD.

    Each step descends the blend (1 - sigma) * CE(f(x), y_target) +
    sigma * Recon(x, y_target), takes the sign, and projects into the linf
    eps-ball. sigma = 0 reduces exactly to targeted PGD on the classifier.
    Success means the classifier predicts the target class. Reconstruction
    gradients flow through the deterministic encoder mean path.
    """
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must be in [0, 1], got {sigma}")
    if steps is None:
        steps = default_iterations(eps, alpha)
    if y_target is None:
        y_target = draw_targets(y_true, seed)
    cls_model.eval()
    cvae_model.eval()

    def blended_loss(inp):
        if sigma == 0.0:
            return F.cross_entropy(cls_model(inp), y_target, reduction="sum")
        recon = (inp - cvae_model.reconstruct(inp, y_target)).flatten(1).pow(2).sum()
        if sigma == 1.0:
            return recon
        cls = F.cross_entropy(cls_model(inp), y_target, reduction="sum")
        return (1.0 - sigma) * cls + sigma * recon

    x_adv = x.clone()
    if eps_rand > 0:
        gen = torch.Generator().manual_seed(seed + 1)
        x_adv = clip_to_ball(x_adv + _uniform_noise(x.shape, eps_rand, gen), x, eps, "linf")
    for _ in range(steps):
        grad = input_gradient(blended_loss, x_adv)
        x_adv = clip_to_ball(x_adv - alpha * grad.sign(), x, eps, "linf")
    return _finish(cls_model, x_adv, x, y_true, "linf", y_target)


# ---------------------------------------------------------------------------
# dispatcher
# ---------------------------------------------------------------------------


def run_attack(config: AttackConfig, model, x, y, cvae=None) -> AttackResult:
    """Execute one AttackConfig against a batch; used by the CLI pipeline."""
    kind = config.kind
    if kind == "random":
        return attack_random(model, x, y, config.eps_atk, seed=config.seed)
    if kind == "fgsm":
        return attack_fgsm(model, x, y, config.eps_atk, norm=config.norm)
    if kind == "rfgsm":
        return attack_rfgsm(
            model, x, y, config.eps_rand, config.eps_atk, norm=config.norm, seed=config.seed
        )
    if kind == "pgd":
        if config.norm != "linf":
            raise ValueError("pgd is defined with the linf norm")
        return attack_pgd(model, x, y, config.eps_atk, config.alpha, config.n)
    if kind == "cw":
        return attack_cw(model, x, y, config.cw_params)
    if kind == "deepfool":
        return attack_deepfool(model, x, config.df_params, y=y)
    if kind == "whitebox_pgd":
        if cvae is None:
            raise ValueError("whitebox_pgd needs the trained CVAE model")
        if config.norm != "linf":
            raise ValueError("whitebox_pgd is defined with the linf norm")
        return attack_whitebox_pgd(
            model, cvae, x, y, config.eps_atk, config.alpha, config.n,
            sigma=config.sigma, seed=config.seed, eps_rand=config.eps_rand,
        )
    raise ValueError(f"unknown attack kind {kind!r}")
