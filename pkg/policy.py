"""
Softmax policies and critics with analytic gradients.

Two parameterizations share one interface:

- TabularNet: one row of outputs per observation key (canonical bytes of the
  observation vector); row 0 is shared by every observation not seen when
  the table was built.
- MLPNet: one hidden tanh layer over a featurized observation (one-hot for
  small-cardinality slots, scaled scalars otherwise).

PolicyModel puts a temperature-scaled softmax on top; CriticModel reads a
single scalar. Gradients are flat vectors aligned with `net.params`.

Also here: SGD / Adam with global-norm clipping, behaviour-cloning
pretraining and versioned binary checkpoints.

Usage:
    python cli.py pretrain --env rooms --suite configs/two_rooms.json --out runs/pretrained
    python cli.py describe runs/pretrained/policy.ckpt
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp, softmax

from env import observation_key

ONE_HOT_LIMIT = 32

CHECKPOINT_MAGIC = b"PPCK"
CHECKPOINT_VERSION = 1
TAG_TABULAR, TAG_MLP = 0, 1
ROLE_POLICY, ROLE_CRITIC = 0, 1


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite during optimization."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or of an unsupported version."""


# ----------------------------------------------------------------------------
# Parameterizations
# ----------------------------------------------------------------------------

class TabularNet:
    tag = TAG_TABULAR

    def __init__(self, keys, out_dim: int, params: np.ndarray | None = None):
        self.keys = list(keys)
        self.index = {key: row + 1 for row, key in enumerate(self.keys)}
        self.out_dim = out_dim
        self.n_rows = len(self.keys) + 1
        if params is None:
            params = np.zeros(self.n_rows * out_dim)
        self.params = np.asarray(params, dtype=np.float64)
        if self.params.shape != (self.n_rows * out_dim,):
            raise ValueError(f"Expected {self.n_rows * out_dim} parameters, got {self.params.shape}")

    def row(self, obs) -> int:
        return self.index.get(observation_key(obs), 0)

    def forward(self, obs) -> np.ndarray:
        r = self.row(obs)
        return self.params[r * self.out_dim:(r + 1) * self.out_dim].copy()

    def backward(self, obs, grad_out, out: np.ndarray | None = None) -> np.ndarray:
        """Gradient of <grad_out, forward(obs)> w.r.t. params (added into `out` if given)."""
        if out is None:
            out = np.zeros_like(self.params)
        r = self.row(obs)
        out[r * self.out_dim:(r + 1) * self.out_dim] += grad_out
        return out

    def copy(self) -> "TabularNet":
        clone = TabularNet.__new__(TabularNet)
        clone.keys, clone.index = self.keys, self.index
        clone.out_dim, clone.n_rows = self.out_dim, self.n_rows
        clone.params = self.params.copy()
        return clone

    def describe(self) -> dict:
        return {"parameterization": "tabular", "rows": self.n_rows, "outputs": self.out_dim,
                "parameters": self.params.size}


class MLPNet:
    """x -> tanh(W1 x + b1) -> W2 h + b2."""

    tag = TAG_MLP

    def __init__(self, cardinalities, hidden: int, out_dim: int, params: np.ndarray | None = None,
                 seed: int = 0, zero_output: bool = True):
        self.cardinalities = tuple(int(c) for c in cardinalities)
        self.hidden = hidden
        self.out_dim = out_dim
        widths = [c if c <= ONE_HOT_LIMIT else 1 for c in self.cardinalities]
        self.offsets = np.concatenate([[0], np.cumsum(widths)[:-1]]).astype(int)
        self.one_hot = np.array([c <= ONE_HOT_LIMIT for c in self.cardinalities])
        self.in_dim = int(sum(widths))
        self._shapes = [(hidden, self.in_dim), (hidden,), (out_dim, hidden), (out_dim,)]
        n_params = sum(int(np.prod(s)) for s in self._shapes)
        if params is None:
            rng = np.random.default_rng(seed)
            W1 = rng.normal(0.0, 1.0 / np.sqrt(self.in_dim), size=(hidden, self.in_dim))
            W2 = np.zeros((out_dim, hidden)) if zero_output else rng.normal(0.0, 1.0 / np.sqrt(hidden), (out_dim, hidden))
            params = np.concatenate([W1.ravel(), np.zeros(hidden), W2.ravel(), np.zeros(out_dim)])
        self.params = np.asarray(params, dtype=np.float64)
        if self.params.shape != (n_params,):
            raise ValueError(f"Expected {n_params} parameters, got {self.params.shape}")

    def _views(self, flat):
        views, start = [], 0
        for shape in self._shapes:
            size = int(np.prod(shape))
            views.append(flat[start:start + size].reshape(shape))
            start += size
        return views

    def featurize(self, obs) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.int64)
        x = np.zeros(self.in_dim)
        cards = np.asarray(self.cardinalities)
        hot = self.one_hot
        x[self.offsets[hot] + np.clip(obs[hot], 0, cards[hot] - 1)] = 1.0
        x[self.offsets[~hot]] = obs[~hot] / cards[~hot]
        return x

    def _hidden(self, x):
        W1, b1, _, _ = self._views(self.params)
        return np.tanh(W1 @ x + b1)

    def forward(self, obs) -> np.ndarray:
        _, _, W2, b2 = self._views(self.params)
        return W2 @ self._hidden(self.featurize(obs)) + b2

    def backward(self, obs, grad_out, out: np.ndarray | None = None) -> np.ndarray:
        if out is None:
            out = np.zeros_like(self.params)
        x = self.featurize(obs)
        h = self._hidden(x)
        _, _, W2, _ = self._views(self.params)
        gW1, gb1, gW2, gb2 = self._views(out)
        g = np.asarray(grad_out, dtype=np.float64)
        gW2 += np.outer(g, h)
        gb2 += g
        pre = (W2.T @ g) * (1.0 - h * h)
        gW1 += np.outer(pre, x)
        gb1 += pre
        return out

    def copy(self) -> "MLPNet":
        return MLPNet(self.cardinalities, self.hidden, self.out_dim, self.params.copy())

    def describe(self) -> dict:
        return {"parameterization": "mlp", "inputs": self.in_dim, "hidden": self.hidden,
                "outputs": self.out_dim, "parameters": self.params.size}


# ----------------------------------------------------------------------------
# Policy / critic
# ----------------------------------------------------------------------------

@dataclass
class PolicyModel:
    net: TabularNet | MLPNet
    temperature: float = 1.0

    @property
    def n_actions(self) -> int:
        return self.net.out_dim

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def logits(self, obs) -> np.ndarray:
        return self.net.forward(obs) / self.temperature

    def action_distribution(self, obs) -> np.ndarray:
        return softmax(self.logits(obs))

    def log_probs(self, obs) -> np.ndarray:
        z = self.logits(obs)
        return z - logsumexp(z)

    def grad_from_logit_grad(self, obs, logit_grad, out: np.ndarray | None = None) -> np.ndarray:
        """Backpropagate a gradient w.r.t. the (temperature-scaled) logits."""
        return self.net.backward(obs, np.asarray(logit_grad) / self.temperature, out)

    def logprob_grad(self, obs, action: int, out: np.ndarray | None = None, scale: float = 1.0) -> np.ndarray:
        """Analytic gradient of log pi(action|obs): 1{a'=a} - pi(a'|s) at the logits."""
        g = -self.action_distribution(obs)
        g[action] += 1.0
        return self.grad_from_logit_grad(obs, scale * g, out)

    def sample_action(self, obs, rng: np.random.Generator) -> tuple[int, float]:
        logp = self.log_probs(obs)
        action = int(rng.choice(len(logp), p=np.exp(logp - logsumexp(logp))))
        return action, float(logp[action])

    def entropy(self, obs) -> float:
        return distribution_entropy(self.action_distribution(obs))

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.net.copy(), self.temperature)

    def describe(self) -> dict:
        return {"role": "policy", "temperature": self.temperature, **self.net.describe()}


@dataclass
class CriticModel:
    net: TabularNet | MLPNet

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def value(self, obs) -> float:
        return float(self.net.forward(obs)[0])

    def value_grad(self, obs, out: np.ndarray | None = None, scale: float = 1.0) -> np.ndarray:
        return self.net.backward(obs, np.array([scale]), out)

    def copy(self) -> "CriticModel":
        return CriticModel(self.net.copy())

    def describe(self) -> dict:
        return {"role": "critic", **self.net.describe()}


def distribution_entropy(probs) -> float:
    probs = np.asarray(probs)
    nz = probs[probs > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy_logit_grad(probs) -> np.ndarray:
    """d H / d logits = -pi_j (log pi_j + H)."""
    probs = np.asarray(probs)
    logs = np.log(np.maximum(probs, 1e-300))
    return -probs * (logs + distribution_entropy(probs))


def make_tabular_policy(keys, n_actions: int, temperature: float = 1.0) -> PolicyModel:
    return PolicyModel(TabularNet(keys, n_actions), temperature)


def make_mlp_policy(cardinalities, n_actions: int, hidden: int = 32, seed: int = 0,
                    temperature: float = 1.0) -> PolicyModel:
    return PolicyModel(MLPNet(cardinalities, hidden, n_actions, seed=seed), temperature)


def make_critic(policy: PolicyModel, hidden: int = 32, seed: int = 0) -> CriticModel:
    """Critic with the policy's parameterization, initialised to output zero."""
    net = policy.net
    if isinstance(net, TabularNet):
        return CriticModel(TabularNet(net.keys, 1))
    return CriticModel(MLPNet(net.cardinalities, hidden, 1, seed=seed + 1))


# ----------------------------------------------------------------------------
# Optimizers
# ----------------------------------------------------------------------------

def clip_grad_norm(grad: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    """Scale `grad` so its global L2 norm is at most max_norm; returns (grad, pre-clip norm)."""
    norm = float(np.linalg.norm(grad))
    if max_norm is not None and norm > max_norm:
        grad = grad * (max_norm / norm)
    return grad, norm


class SGD:
    def __init__(self, lr: float, max_grad_norm: float | None = None):
        self.lr = lr
        self.max_grad_norm = max_grad_norm

    def step(self, params: np.ndarray, grad: np.ndarray) -> float:
        """Descend on `grad` in place; returns the pre-clip gradient norm."""
        grad, norm = clip_grad_norm(grad, self.max_grad_norm)
        params -= self.lr * grad
        return norm

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict) -> None:
        pass


class Adam:
    def __init__(self, lr: float, max_grad_norm: float | None = None,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.max_grad_norm = max_grad_norm
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params: np.ndarray, grad: np.ndarray) -> float:
        grad, norm = clip_grad_norm(grad, self.max_grad_norm)
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return norm

    def state_dict(self) -> dict:
        if self.m is None:
            return {"t": self.t}
        return {"t": self.t, "m": self.m.tolist(), "v": self.v.tolist()}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state.get("t", 0))
        if "m" in state:
            self.m = np.asarray(state["m"], dtype=np.float64)
            self.v = np.asarray(state["v"], dtype=np.float64)


def make_optimizer(name: str, lr: float, max_grad_norm: float | None = None):
    if name == "sgd":
        return SGD(lr, max_grad_norm)
    if name == "adam":
        return Adam(lr, max_grad_norm)
    raise ValueError(f"Unknown optimizer '{name}'")


# ----------------------------------------------------------------------------
# Behaviour cloning
# ----------------------------------------------------------------------------

@dataclass
class BCReport:
    policy: PolicyModel
    holdout_before: float
    holdout_after: float
    losses: list[float] = field(default_factory=list)


def cross_entropy(policy: PolicyModel, observations, actions) -> float:
    if len(actions) == 0:
        return float("nan")
    return float(-np.mean([policy.log_probs(o)[a] for o, a in zip(observations, actions)]))


def behavior_cloning(policy: PolicyModel, dataset, epochs: int = 20, lr: float = 0.05,
                     entropy_coef: float = 0.01, batch_size: int = 64, holdout: float = 0.2,
                     optimizer: str = "adam", seed: int = 0, verbose: bool = False) -> BCReport:
    """Minimise cross-entropy minus entropy_coef * entropy on (observation, action) pairs."""
    n = len(dataset.actions)
    if n == 0:
        raise ValueError("Cannot pretrain on an empty dataset")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_holdout = int(holdout * n) if n >= 5 else 0
    held, train_idx = order[:n_holdout], order[n_holdout:]
    if n_holdout == 0:
        held = train_idx
    held_obs = [dataset.observations[i] for i in held]
    held_act = [dataset.actions[i] for i in held]

    before = cross_entropy(policy, held_obs, held_act)
    opt = make_optimizer(optimizer, lr)
    losses = []
    step = 0
    for epoch in range(epochs):
        shuffled = rng.permutation(train_idx)
        for start in range(0, len(shuffled), batch_size):
            batch = shuffled[start:start + batch_size]
            grad = np.zeros_like(policy.params)
            loss = 0.0
            for i in batch:
                obs, action = dataset.observations[i], dataset.actions[i]
                probs = policy.action_distribution(obs)
                loss += -np.log(max(probs[action], 1e-300)) - entropy_coef * distribution_entropy(probs)
                g = probs.copy()
                g[action] -= 1.0
                g -= entropy_coef * entropy_logit_grad(probs)
                policy.grad_from_logit_grad(obs, g / len(batch), grad)
            loss /= len(batch)
            step += 1
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(f"Behaviour-cloning loss diverged at step {step} (epoch {epoch + 1})")
            opt.step(policy.params, grad)
            losses.append(float(loss))
        if verbose:
            print(f"  Epoch {epoch + 1}/{epochs}: loss {losses[-1]:.4f}")

    after = cross_entropy(policy, held_obs, held_act)
    if verbose:
        print(f"✓ Held-out cross-entropy {before:.4f} -> {after:.4f}")
    return BCReport(policy, before, after, losses)


def pretrain_bc(policy: PolicyModel, dataset, epochs: int = 20, lr: float = 0.05,
                entropy_coef: float = 0.01, **kwargs) -> PolicyModel:
    return behavior_cloning(policy, dataset, epochs, lr, entropy_coef, **kwargs).policy


# ----------------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------------

def save_checkpoint(model: PolicyModel | CriticModel, path: str | Path) -> None:
    """Versioned binary: magic, version, tag, role, shape header, LE float64 params, keys."""
    net = model.net
    role = ROLE_POLICY if isinstance(model, PolicyModel) else ROLE_CRITIC
    temperature = model.temperature if role == ROLE_POLICY else 1.0
    header = CHECKPOINT_MAGIC + struct.pack("<IBBd", CHECKPOINT_VERSION, net.tag, role, temperature)
    if net.tag == TAG_TABULAR:
        key_len = len(net.keys[0]) if net.keys else 0
        shape = struct.pack("<III", len(net.keys), net.out_dim, key_len)
        tail = b"".join(net.keys)
    else:
        shape = struct.pack("<IIII", net.hidden, net.out_dim, len(net.cardinalities), 0)
        shape += np.asarray(net.cardinalities, dtype="<i8").tobytes()
        tail = b""
    body = np.asarray(net.params, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(header + shape + struct.pack("<Q", net.params.size) + body + tail)


def load_checkpoint(path: str | Path) -> PolicyModel | CriticModel:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic bytes)")
    try:
        version, tag, role, temperature = struct.unpack_from("<IBBd", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {version}")
        offset = 4 + struct.calcsize("<IBBd")
        if tag == TAG_TABULAR:
            n_keys, out_dim, key_len = struct.unpack_from("<III", blob, offset)
            offset += 12
        elif tag == TAG_MLP:
            hidden, out_dim, n_slots, _ = struct.unpack_from("<IIII", blob, offset)
            offset += 16
            cards = np.frombuffer(blob, dtype="<i8", count=n_slots, offset=offset)
            offset += 8 * n_slots
        else:
            raise CheckpointError(f"Unknown parameterization tag {tag}")
        (n_params,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        params = np.frombuffer(blob, dtype="<f8", count=n_params, offset=offset).astype(np.float64)
        offset += 8 * n_params
    except CheckpointError:
        raise
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"Truncated checkpoint {path}: {e}") from e

    if tag == TAG_TABULAR:
        keys = [blob[offset + i * key_len: offset + (i + 1) * key_len] for i in range(n_keys)]
        net = TabularNet(keys, out_dim, params)
    else:
        net = MLPNet(cards.tolist(), hidden, out_dim, params)
    if role == ROLE_POLICY:
        return PolicyModel(net, temperature)
    return CriticModel(net)


def describe(model: PolicyModel | CriticModel) -> str:
    info = model.describe()
    return "\n".join(f"{k:>16}: {v:,}" if isinstance(v, int) else f"{k:>16}: {v}" for k, v in info.items())
