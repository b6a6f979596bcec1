"""Learned dropout masks trained with trajectory balance.

A forward pass through a backbone is a trajectory: at dropout site t the
state is (input, masks already chosen for sites 1..t-1), summarised by the
pooled activation entering the site, and the action is the binary keep
vector for that site.  Policies factorise over the units of a site, so

    log q(z | x) = sum_t sum_u log Bernoulli(z_tu; p_tu(state_t)).

Trajectory balance pushes log Z(x) + log q(z | x) towards
log R(z; x, y) = log p(y | x, z) + log p(z), whose fixed point samples masks
from the posterior over masks.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import NonFiniteError, Tensor
from .config import BackboneConfig, GFlowOutConfig, MaskMode
from .metrics import PredictiveDistribution
from .nn import Backbone, cross_entropy, dense, kaiming_uniform, mask_multiply, softmax_np, zeros
from .optim import Adam

PROB_FLOOR = 1e-4
MAX_ENUM_UNITS = 16


@dataclass
class DropoutMask:
    site: str
    keep: np.ndarray  # (units,) or (batch, units), entries in {0, 1}


@dataclass
class MaskTrajectory:
    """Masks chosen site by site plus the accumulated log policy probability."""

    masks: list[DropoutMask] = field(default_factory=list)
    probs: list[np.ndarray] = field(default_factory=list)
    log_q: Tensor | None = None
    x_embed: Tensor | None = None

    def record(self, mask: DropoutMask, probs: np.ndarray, log_q_site: Tensor) -> None:
        self.masks.append(mask)
        self.probs.append(probs)
        self.log_q = log_q_site if self.log_q is None else self.log_q + log_q_site

    def as_dict(self) -> dict[str, DropoutMask]:
        return {m.site: m for m in self.masks}

    def log_q_value(self) -> np.ndarray:
        return np.zeros(0) if self.log_q is None else self.log_q.data


@dataclass
class RewardComponents:
    log_likelihood: np.ndarray
    log_prior: np.ndarray

    @property
    def log_R(self) -> np.ndarray:
        return self.log_likelihood + self.log_prior


def _uniform(rng, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform draws from one generator, or one generator per batch row."""
    if rng is None:
        raise ValueError("stochastic mask modes need an explicit random generator")
    if isinstance(rng, np.random.Generator):
        return rng.random(shape)
    rows = list(rng)
    if len(rows) != shape[0]:
        raise ValueError(f"got {len(rows)} generators for a batch of {shape[0]}")
    return np.stack([g.random(shape[1:]) for g in rows])


def bernoulli_log_prob(bits: np.ndarray, keep_prob: float) -> np.ndarray:
    """Sum over the last axis of log Bernoulli(bit; keep_prob), with 0·log 0 = 0."""
    bits = np.asarray(bits, dtype=np.float64)
    kept = bits.sum(axis=-1)
    dropped = bits.shape[-1] - kept
    out = np.zeros_like(kept)
    if keep_prob > 0:
        out = out + kept * math.log(keep_prob)
    elif np.any(kept):
        return np.where(kept > 0, -np.inf, out)
    if keep_prob < 1:
        out = out + dropped * math.log1p(-keep_prob)
    elif np.any(dropped):
        return np.where(dropped > 0, -np.inf, out)
    return out


def _pool(activation: Tensor) -> Tensor:
    """Mean over spatial axes (conv maps) or tokens (transformer)."""
    return activation.mean(axis=(2, 3)) if activation.ndim == 4 else activation.mean(axis=1)


class MaskPolicyNet:
    """Per-site MLP: [X, H] (bottom-up) or H (top-down) -> keep probabilities."""

    def __init__(self, prefix: str, n_in: int, n_hidden: int, n_units: int, init_keep: float, rng):
        self.prefix = prefix
        self.n_units = n_units
        self.params = {
            prefix + "l0.w": kaiming_uniform(rng, (n_hidden, n_in), n_in),
            prefix + "l0.b": zeros(n_hidden),
            prefix + "l1.w": zeros((n_units, n_hidden)),
            prefix + "l1.b": Tensor(np.full(n_units, _logit(init_keep)), requires_grad=True),
        }

    def __call__(self, inputs: Tensor) -> Tensor:
        p = self.params
        h = ag.relu(dense(inputs, p[self.prefix + "l0.w"], p[self.prefix + "l0.b"]))
        logits = dense(h, p[self.prefix + "l1.w"], p[self.prefix + "l1.b"])
        return ag.clip(ag.sigmoid(logits), PROB_FLOOR, 1.0 - PROB_FLOOR)


class LogZEstimator:
    """log Z(x) from the pooled input embedding (bottom-up) or one learned scalar."""

    def __init__(self, conditional: bool, n_in: int, n_hidden: int, rng):
        self.conditional = conditional
        if conditional:
            self.params = {
                "gflowout/logz.l0.w": kaiming_uniform(rng, (n_hidden, n_in), n_in),
                "gflowout/logz.l0.b": zeros(n_hidden),
                "gflowout/logz.l1.w": zeros((1, n_hidden)),
                "gflowout/logz.l1.b": zeros(1),
            }
        else:
            self.params = {"gflowout/logz": zeros(1)}

    def __call__(self, x_embed: Tensor) -> Tensor:
        p = self.params
        batch = x_embed.shape[0]
        if not self.conditional:
            return p["gflowout/logz"] * np.ones(batch)
        h = ag.relu(dense(x_embed, p["gflowout/logz.l0.w"], p["gflowout/logz.l0.b"]))
        return dense(h, p["gflowout/logz.l1.w"], p["gflowout/logz.l1.b"]).reshape(batch)


def _logit(p: float) -> float:
    p = min(max(p, PROB_FLOOR), 1.0 - PROB_FLOOR)
    return math.log(p / (1.0 - p))


class GFlowOut:
    """Mask policies, log-partition estimator and mask application for one backbone."""

    def __init__(self, backbone: BackboneConfig, config: GFlowOutConfig, rng: np.random.Generator | None = None):
        self.backbone = backbone
        self.config = config
        self.mode = MaskMode(config.mask_mode)
        self.pi = float(config.pi)
        self.sites = backbone.dropout_sites
        self.units = backbone.site_units
        self.policies: list[MaskPolicyNet] = []
        self.log_z_net: LogZEstimator | None = None
        if self.mode.learned:
            if rng is None:
                raise ValueError("learned mask modes need a generator for initialisation")
            x_dim = backbone.embed_units if self.mode is MaskMode.BOTTOMUP else 0
            for i, u in enumerate(self.units):
                self.policies.append(
                    MaskPolicyNet(f"gflowout/site{i}.", x_dim + u, config.policy_hidden, u, self.pi, rng)
                )
            self.log_z_net = LogZEstimator(
                self.mode is MaskMode.BOTTOMUP, backbone.embed_units, config.policy_hidden, rng
            )

    @property
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for pol in self.policies:
            out.update(pol.params)
        if self.log_z_net is not None:
            out.update(self.log_z_net.params)
        return out

    # -- per-site primitives ---------------------------------------------
    def keep_probs(self, index: int, x_embed: Tensor, context: Tensor) -> Tensor:
        """Policy keep-probabilities at site ``index``; inputs are detached."""
        h = _pool(context).detach() if context.ndim > 2 else context.detach()
        if self.mode is MaskMode.BOTTOMUP:
            inputs = ag.concat([x_embed.detach(), h], axis=-1)
        else:
            inputs = h
        return self.policies[index](inputs)

    def sample_site(self, index: int, x_embed: Tensor, context: Tensor, rng):
        """Sample one site's keep bits; returns (bits, log_q per sample, keep probs)."""
        batch, units = context.shape[0], self.units[index]
        if self.mode is MaskMode.NONE:
            return np.ones((batch, units)), Tensor(np.zeros(batch)), np.ones((batch, units))
        if self.mode is MaskMode.RANDOM:
            probs = np.full((batch, units), self.pi)
            bits = (_uniform(rng, (batch, units)) < self.pi).astype(np.float64)
            return bits, Tensor(bernoulli_log_prob(bits, self.pi)), probs
        p = self.keep_probs(index, x_embed, context)
        bits = (_uniform(rng, p.shape) < p.data).astype(np.float64)
        log_q = (ag.log(p) * bits + ag.log(1.0 - p) * (1.0 - bits)).sum(axis=-1)
        return bits, log_q, p.data

    def apply(self, activation: Tensor, keep, training: bool = True) -> Tensor:
        return apply_mask(activation, keep, self.mode, training, self.pi)

    def sampler(self, rng, trajectory: MaskTrajectory | None = None):
        """Site function that samples masks lazily as the forward pass reaches each site."""

        def site_fn(index, name, activation, x_embed):
            bits, log_q, probs = self.sample_site(index, x_embed, activation, rng)
            if trajectory is not None:
                trajectory.x_embed = x_embed
                trajectory.record(DropoutMask(name, bits), probs, log_q)
            return self.apply(activation, bits, training=True)

        return site_fn

    def expected(self, capture_probs: list | None = None):
        """Deterministic site function multiplying by keep-probabilities."""

        def site_fn(index, name, activation, x_embed):
            if not self.mode.learned:
                return activation
            probs = self.keep_probs(index, x_embed, activation).data
            if capture_probs is not None:
                capture_probs.append(probs)
            return mask_multiply(activation, probs)

        return site_fn

    def log_z(self, x_embed: Tensor) -> Tensor:
        if self.log_z_net is None:
            return Tensor(np.zeros(x_embed.shape[0]))
        return self.log_z_net(x_embed.detach())


# -- module-level operations ----------------------------------------------


def sample_masks(gfo: GFlowOut, x_embed: Tensor, contexts: Iterable[Tensor], rng, training: bool = True):
    """Sample masks for each site from lazily supplied contexts.

    Returns ``(masks, log_q)``; with ``training=False`` learned modes return
    their keep-probabilities (expected masks) and ``log_q`` is zero.
    """
    masks: dict[str, DropoutMask] = {}
    log_q = None
    for index, context in enumerate(contexts):
        name = gfo.sites[index]
        if training:
            bits, lq, _ = gfo.sample_site(index, x_embed, context, rng)
        else:
            batch = context.shape[0]
            bits = (
                gfo.keep_probs(index, x_embed, context).data
                if gfo.mode.learned
                else np.ones((batch, gfo.units[index]))
            )
            lq = Tensor(np.zeros(batch))
        masks[name] = DropoutMask(name, bits)
        log_q = lq if log_q is None else log_q + lq
    if len(masks) != len(gfo.sites):
        raise ValueError(f"expected {len(gfo.sites)} contexts, got {len(masks)}")
    return masks, log_q


def apply_mask(activation: Tensor, mask, mode: MaskMode | str, training: bool = True, pi: float = 1.0) -> Tensor:
    """Mask a site activation.

    ``none`` is the identity.  ``random`` rescales kept units by 1/pi while
    masks are being sampled (``training``); learned modes never rescale.
    """
    mode = MaskMode(mode)
    keep = getattr(mask, "keep", mask)
    if mode is MaskMode.NONE:
        units = activation.shape[1] if activation.ndim == 4 else activation.shape[-1]
        if np.shape(keep)[-1] != units:
            raise ValueError(f"mask has {np.shape(keep)[-1]} units, site has {units}")
        return activation
    if mode is MaskMode.RANDOM:
        if not training:
            return activation
        keep = np.asarray(keep, dtype=np.float64) * (1.0 / pi)
    return mask_multiply(activation, keep)


def reward(logits, labels, masks, pi_prior: float) -> RewardComponents:
    """log p(y | x, z) plus the independent Bernoulli(pi) log prior over keep bits."""
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    z = logits - logits.max(axis=-1, keepdims=True)
    log_softmax = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    if log_softmax.ndim == 1:
        log_lik = log_softmax[int(labels)]
    else:
        log_lik = np.take_along_axis(log_softmax, labels.reshape(-1, 1), axis=-1)[:, 0]
    if isinstance(masks, dict):
        masks = list(masks.values())
    log_prior = 0.0
    for m in masks:
        log_prior = log_prior + bernoulli_log_prob(getattr(m, "keep", m), pi_prior)
    return RewardComponents(np.asarray(log_lik, dtype=np.float64), np.asarray(log_prior, dtype=np.float64))


def tb_loss(log_q, log_Z, log_R) -> Tensor:
    """(log Z + log q − log R)^2 per trajectory; log R is treated as a constant."""
    log_q, log_Z = ag.as_tensor(log_q), ag.as_tensor(log_Z)
    log_R = np.asarray(log_R.data if isinstance(log_R, Tensor) else log_R, dtype=np.float64)
    for name, v in (("log_q", log_q.data), ("log_Z", log_Z.data), ("log_R", log_R)):
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"trajectory balance input {name} is not finite")
    delta = log_Z + log_q - log_R
    return delta * delta


@dataclass
class StepResult:
    ce_loss: float
    tb_loss: float
    correct: int
    n: int


def train_step(
    model: Backbone,
    gfo: GFlowOut,
    x: np.ndarray,
    y: np.ndarray,
    rng,
    model_opt: Adam | None,
    policy_opt: Adam | None,
    lambda_tb: float = 1.0,
) -> StepResult:
    """One joint update: cross-entropy for the classifier, TB for policies and log Z.

    Policy inputs are detached and log R is a constant inside the TB term,
    so each objective reaches only its own parameter group.
    """
    trajectory = MaskTrajectory()
    logits = model(x, gfo.sampler(rng, trajectory) if gfo.mode is not MaskMode.NONE else None)
    ce = cross_entropy(logits, y)
    total = ce.mean()
    tb_value = 0.0
    if gfo.mode.learned:
        comps = reward(logits, y, trajectory.masks, gfo.pi)
        tb = tb_loss(trajectory.log_q, gfo.log_z(trajectory.x_embed), comps.log_R).mean()
        tb_value = tb.item()
        total = total + tb * lambda_tb
    if not np.isfinite(total.data).all():
        raise NonFiniteError("training loss diverged")
    for opt in (model_opt, policy_opt):
        if opt is not None:
            opt.zero_grad()
    total.backward()
    for opt in (model_opt, policy_opt):
        if opt is not None:
            opt.step()
    correct = int((logits.data.argmax(axis=1) == y).sum())
    return StepResult(float(ce.data.mean()), tb_value, correct, len(y))


def tb_policy_step(model: Backbone, gfo: GFlowOut, x, y, rng, policy_opt: Adam) -> float:
    """TB-only update with the classifier frozen (used for enumerable checks)."""
    trajectory = MaskTrajectory()
    logits = model(x, gfo.sampler(rng, trajectory))
    comps = reward(logits, y, trajectory.masks, gfo.pi)
    tb = tb_loss(trajectory.log_q, gfo.log_z(trajectory.x_embed), comps.log_R).mean()
    policy_opt.zero_grad()
    for p in model.params.values():
        p.zero_grad()
    tb.backward()
    policy_opt.step()
    return tb.item()


# -- exact enumeration -----------------------------------------------------


@dataclass
class FlowCheck:
    masks: np.ndarray  # (n_masks, total_units) keep bits, sites concatenated in order
    log_rewards: np.ndarray
    rewards: np.ndarray
    Z: float
    log_Z_exact: float
    log_Z_learned: float
    target: np.ndarray
    q: np.ndarray
    log_q: np.ndarray
    tv: float
    flow_max_violation: float
    n_states: int

    @property
    def log_Z_error(self) -> float:
        return abs(self.log_Z_learned - self.log_Z_exact)

    @property
    def expected_tb_loss(self) -> float:
        """Exact on-policy mean of (log Z + log q - log R)^2 over all masks."""
        delta = self.log_Z_learned + self.log_q - self.log_rewards
        return float((self.q * delta * delta).sum())


def exact_partition(log_rewards) -> tuple[float, np.ndarray]:
    """(log Z, R / Z) for log rewards over an enumerated mask space."""
    log_rewards = np.asarray(log_rewards, dtype=np.float64)
    m = log_rewards.max()
    log_Z = float(m + math.log(np.exp(log_rewards - m).sum()))
    return log_Z, np.exp(log_rewards - log_Z)


def enumerate_masks(units: Sequence[int]) -> np.ndarray:
    total = int(sum(units))
    return np.array(list(itertools.product((0.0, 1.0), repeat=total)))


def brute_force_mask_distribution(model: Backbone, gfo: GFlowOut, x, y) -> FlowCheck:
    """Exact reward, partition function and policy distribution over all masks of one sample."""
    units = gfo.units
    if sum(units) > MAX_ENUM_UNITS:
        raise ValueError(f"{sum(units)} mask units; enumeration is limited to {MAX_ENUM_UNITS}")
    x = np.asarray(x, dtype=np.float64).reshape((1,) + np.shape(x)[-3:])
    all_bits = enumerate_masks(units)
    n = all_bits.shape[0]
    offsets = np.cumsum([0] + list(units))
    splits = [all_bits[:, offsets[t] : offsets[t + 1]] for t in range(len(units))]
    site_probs: list[np.ndarray] = []
    embeds: list[Tensor] = []

    def site_fn(index, name, activation, x_embed):
        bits = splits[index]
        embeds.append(x_embed)
        if gfo.mode.learned:
            site_probs.append(gfo.keep_probs(index, x_embed, activation).data)
        elif gfo.mode is MaskMode.RANDOM:
            site_probs.append(np.full(bits.shape, gfo.pi))
        else:
            site_probs.append(np.ones(bits.shape))
        return gfo.apply(activation, bits, training=True)

    xb = np.repeat(x, n, axis=0)
    with ag.no_grad():
        logits = model(xb, site_fn)
        log_Z_learned = float(gfo.log_z(embeds[0]).data[0])
    labels = np.full(n, int(y))
    comps = reward(logits, labels, splits, gfo.pi)
    log_R = comps.log_R
    with np.errstate(divide="ignore"):
        step_log_q = np.stack(
            [np.where(bits > 0, np.log(p), np.log1p(-p)).sum(axis=1) for bits, p in zip(splits, site_probs)],
            axis=1,
        )
    log_q = step_log_q.sum(axis=1)
    log_Z_exact, target = exact_partition(log_R)
    q = np.exp(log_q)
    violation, n_states = _flow_violation(splits, site_probs, step_log_q, math.exp(log_Z_learned))
    return FlowCheck(
        masks=all_bits,
        log_rewards=log_R,
        rewards=np.exp(log_R),
        Z=math.exp(log_Z_exact),
        log_Z_exact=log_Z_exact,
        log_Z_learned=log_Z_learned,
        target=target,
        q=q,
        log_q=log_q,
        tv=float(0.5 * np.abs(q - target).sum()),
        flow_max_violation=violation,
        n_states=n_states,
    )


def _flow_violation(splits, site_probs, step_log_q, z_learned: float) -> tuple[float, int]:
    """Largest flow-consistency violation over non-terminal states.

    Top-down, a state's flow is F(s) = Z * prod of policy probabilities along
    its (unique) path.  Bottom-up, an edge flow F(s, a) is the total terminal
    flow Z * q(z) over complete masks passing through (s, a).  Checks
    F(s) = sum_a F(s, a) and F(s, a) = F(s) * P(a | s) at every state.
    """
    T = len(splits)
    n = splits[0].shape[0]
    terminal = z_learned * np.exp(step_log_q.sum(axis=1))
    path_log = np.concatenate([np.zeros((n, 1)), np.cumsum(step_log_q, axis=1)], axis=1)
    worst, n_states = 0.0, 0
    for t in range(T):
        actions = enumerate_masks([splits[t].shape[1]])
        groups: dict[tuple, list[int]] = {}
        for row in range(n):
            key = tuple(np.concatenate([s[row] for s in splits[:t]]).tolist()) if t else ()
            groups.setdefault(key, []).append(row)
        for rows in groups.values():
            n_states += 1
            f_s = z_learned * math.exp(path_log[rows[0], t])
            p = site_probs[t][rows[0]]
            out = 0.0
            for a in actions:
                through = [r for r in rows if np.array_equal(splits[t][r], a)]
                f_sa = float(terminal[through].sum())
                p_a = float(np.prod(np.where(a > 0, p, 1.0 - p)))
                worst = max(worst, abs(f_sa - f_s * p_a))
                out += f_sa
            worst = max(worst, abs(f_s - out))
    return worst, n_states + n


# -- inference ------------------------------------------------------------


def predictive_passes(
    model: Backbone, gfo: GFlowOut, x, labels, rng, K: int = 5, ids: Sequence[str] | None = None
) -> list[PredictiveDistribution]:
    """K stochastic passes plus one expected-mask pass per sample."""
    if K < 1:
        raise ValueError("need at least one pass")
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    with ag.no_grad():
        point = softmax_np(model(x, gfo.expected()).data)
        passes = []
        for _ in range(K):
            if gfo.mode is MaskMode.NONE:
                logits = model(x)
            else:
                logits = model(x, gfo.sampler(rng))
            passes.append(softmax_np(logits.data))
    stacked = np.stack(passes, axis=1)  # batch, K, C
    ids = ids if ids is not None else [str(i) for i in range(len(x))]
    return [PredictiveDistribution(stacked[i], int(labels[i]), point[i], ids[i]) for i in range(len(x))]
