"""Per-vehicle content demand: a one-block self-attentive sequential
recommender trained by two-level federated averaging, plus frequency and
oracle baselines.

File ids in request sequences run from 1 to F; id 0 is the virtual padding
file. Demand rows drop the virtual file, so column ``j`` of a demand row
belongs to file ``j + 1``.
"""
from __future__ import annotations

import csv
import warnings
from collections import defaultdict
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import expit, log_expit

__all__ = [
    "SasrecParams",
    "HflSchedule",
    "Message",
    "VehicleClient",
    "sasrec_forward",
    "sasrec_loss",
    "sasrec_loss_grad",
    "sample_negatives",
    "window_targets",
    "hfl_round",
    "average_messages",
    "predict_demand",
    "frequency_demand",
    "oracle_demand",
    "save_checkpoint",
    "load_checkpoint",
    "read_request_csv",
    "write_request_csv",
]


@dataclass
class SasrecParams:
    """Recommender weights (column-vector convention of the embeddings).

    ``M`` is d x (F+1) with the virtual file in column 0, ``P`` is
    d x n for ``n = I - I'`` input positions, the remaining matrices are
    d x d and the biases have length d.
    """

    M: np.ndarray
    P: np.ndarray
    Wq: np.ndarray
    Wk: np.ndarray
    Wv: np.ndarray
    W1: np.ndarray
    W2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        d = self.M.shape[0]
        for f in fields(self):
            arr = np.asarray(getattr(self, f.name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {f.name}")
            setattr(self, f.name, arr)
        shapes = {"Wq": (d, d), "Wk": (d, d), "Wv": (d, d), "W1": (d, d), "W2": (d, d), "b1": (d,), "b2": (d,)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.P.ndim != 2 or self.P.shape[0] != d:
            raise ValueError("positional embeddings must be d x n")

    @property
    def dim(self) -> int:
        return self.M.shape[0]

    @property
    def file_count(self) -> int:
        return self.M.shape[1] - 1

    @property
    def positions(self) -> int:
        return self.P.shape[1]

    @classmethod
    def init(cls, file_count, positions, dim=32, rng=None, scale=0.1) -> "SasrecParams":
        rng = np.random.default_rng(rng)
        M = rng.normal(0.0, scale, (dim, file_count + 1))
        M[:, 0] = 0.0
        mats = [rng.normal(0.0, scale, (dim, dim)) for _ in range(5)]
        return cls(M, rng.normal(0.0, scale, (dim, positions)), *mats, np.zeros(dim), np.zeros(dim))

    @classmethod
    def zeros(cls, file_count, positions, dim=32) -> "SasrecParams":
        z = np.zeros((dim, dim))
        return cls(np.zeros((dim, file_count + 1)), np.zeros((dim, positions)),
                   z, z, z, z, z, np.zeros(dim), np.zeros(dim))

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name).copy() for f in fields(self)}

    @classmethod
    def from_dict(cls, d) -> "SasrecParams":
        return cls(**{f.name: np.array(d[f.name], dtype=np.float64) for f in fields(cls)})

    def copy(self) -> "SasrecParams":
        return SasrecParams.from_dict(self.to_dict())

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, f.name).ravel() for f in fields(self)])

    def with_flat(self, z) -> "SasrecParams":
        out, k = {}, 0
        for f in fields(self):
            arr = getattr(self, f.name)
            out[f.name] = np.asarray(z[k:k + arr.size]).reshape(arr.shape)
            k += arr.size
        return SasrecParams(**out)


def _check_seq(params, seq):
    seq = np.asarray(seq, dtype=np.int64)
    if seq.ndim != 1 or seq.size != params.positions:
        raise ValueError(f"input sequence must have {params.positions} entries, got {seq.shape}")
    if seq.size and (seq.min() < 0 or seq.max() > params.file_count):
        raise ValueError(f"file id out of range 0..{params.file_count}")
    return seq


def _forward(p: SasrecParams, seq):
    n, d = seq.size, p.dim
    E = p.M[:, seq].T + p.P.T
    Q, K, V = E @ p.Wq, E @ p.Wk, E @ p.Wv
    S = Q @ K.T / np.sqrt(d)
    S[np.triu_indices(n, 1)] = -np.inf      # position i sees positions <= i
    S -= S.max(axis=1, keepdims=True)
    A = np.exp(S)
    A /= A.sum(axis=1, keepdims=True)
    Z = A @ V
    pre = Z @ p.W1 + p.b1
    H = np.maximum(pre, 0.0)
    Fh = H @ p.W2 + p.b2
    logits = Fh @ p.M[:, 1:]
    return logits, (E, Q, K, V, A, Z, pre, H, Fh)


def sasrec_forward(params: SasrecParams, seq) -> np.ndarray:
    """Scores ``r[i, j]`` that file ``j + 1`` follows input position ``i``.

    ``seq`` holds ``n`` file ids (0 = padding). Attention is causal.
    """
    seq = _check_seq(params, seq)
    return expit(_forward(params, seq)[0])


def window_targets(window, positions: int, targets: int):
    """Split a length ``n + I'`` window into inputs and per-position targets.

    Position ``i`` of the input is followed by the next ``I'`` ids of the
    window; padding ids are dropped from the target sets.
    """
    window = np.asarray(window, dtype=np.int64)
    if window.size != positions + targets:
        raise ValueError(f"window must have {positions + targets} entries, got {window.size}")
    seq = window[:positions]
    tg = [sorted(set(int(f) for f in window[i + 1:i + 1 + targets]) - {0}) for i in range(positions)]
    return seq, tg


def sample_negatives(targets, file_count, count, rng):
    """Per-position negatives: ``count`` ids drawn uniformly without
    replacement from 1..F minus that position's positives."""
    out = []
    for pos in targets:
        if not pos:
            out.append([])
            continue
        pool = np.setdiff1d(np.arange(1, file_count + 1), pos)
        k = min(count, pool.size)
        out.append(sorted(rng.choice(pool, size=k, replace=False).tolist()))
    return out


def _loss_setup(params, seq, targets, negatives, num_negatives, rng):
    seq = _check_seq(params, seq)
    if len(targets) != seq.size:
        raise ValueError("need one target list per input position")
    if not any(len(t) for t in targets):
        raise ValueError("no positive targets")
    F = params.file_count
    for t in targets:
        if any(not 1 <= f <= F for f in t):
            raise ValueError(f"target id out of range 1..{F}")
    if negatives is None:
        negatives = sample_negatives(targets, F, num_negatives, np.random.default_rng(rng))
    pos = (np.array([i for i, t in enumerate(targets) for _ in t], dtype=np.int64),
           np.array([f - 1 for t in targets for f in t], dtype=np.int64))
    neg = (np.array([i for i, t in enumerate(negatives) for _ in t], dtype=np.int64),
           np.array([f - 1 for t in negatives for f in t], dtype=np.int64))
    return seq, pos, neg


def sasrec_loss(params: SasrecParams, seq, targets, negatives=None, num_negatives=100, rng=None) -> float:
    """The loss of :func:`sasrec_loss_grad` without the backward pass."""
    seq, pos, neg = _loss_setup(params, seq, targets, negatives, num_negatives, rng)
    logits = _forward(params, seq)[0]
    return float(-log_expit(logits[pos]).sum() - log_expit(-logits[neg]).sum())


def sasrec_loss_grad(params: SasrecParams, seq, targets, negatives=None, num_negatives=100, rng=None):
    """Binary cross entropy over positives and sampled negatives, with its
    exact gradient.

    ``loss = sum_i [ sum_{f in targets_i} -log r_if + sum_{f in neg_i} -log(1 - r_if) ]``.
    Returns ``(loss, grad)`` with ``grad`` a :class:`SasrecParams`. Column 0
    of ``grad.M`` is always zero.
    """
    seq, (rows_p, cols_p), (rows_n, cols_n) = _loss_setup(params, seq, targets, negatives, num_negatives, rng)
    logits, (E, Q, K, V, A, Z, pre, H, Fh) = _forward(params, seq)
    lp, ln = logits[rows_p, cols_p], logits[rows_n, cols_n]
    loss = float(-log_expit(lp).sum() - log_expit(-ln).sum())

    G = np.zeros_like(logits)
    np.add.at(G, (rows_p, cols_p), expit(lp) - 1.0)
    np.add.at(G, (rows_n, cols_n), expit(ln))

    d = params.dim
    gM = np.zeros_like(params.M)
    gM[:, 1:] = Fh.T @ G
    dF = G @ params.M[:, 1:].T
    gW2, gb2 = H.T @ dF, dF.sum(axis=0)
    dpre = (dF @ params.W2.T) * (pre > 0)
    gW1, gb1 = Z.T @ dpre, dpre.sum(axis=0)
    dZ = dpre @ params.W1.T
    dA = dZ @ V.T
    dV = A.T @ dZ
    dS = A * (dA - (dA * A).sum(axis=1, keepdims=True)) / np.sqrt(d)
    dQ, dK = dS @ K, dS.T @ Q
    gWq, gWk, gWv = E.T @ dQ, E.T @ dK, E.T @ dV
    dE = dQ @ params.Wq.T + dK @ params.Wk.T + dV @ params.Wv.T
    gP = dE.T.copy()
    np.add.at(gM.T, seq, dE)
    gM[:, 0] = 0.0   # the padding embedding is frozen at zero
    return loss, SasrecParams(gM, gP, gWq, gWk, gWv, gW1, gW2, gb1, gb2)


def predict_demand(params: SasrecParams, history) -> np.ndarray:
    """Demand row from the scores at the last input position.

    Uses the most recent ``n`` ids of ``history``, left-padded with 0.
    """
    history = np.asarray(history, dtype=np.int64)
    n = params.positions
    seq = np.zeros(n, dtype=np.int64)
    tail = history[-n:] if history.size else history
    if tail.size:
        seq[n - tail.size:] = tail
    return sasrec_forward(params, seq)[-1]


# -- hierarchical federated averaging -------------------------------------

@dataclass(frozen=True)
class HflSchedule:
    """Local steps per RSU aggregation, RSU aggregations per MBS aggregation,
    and the local learning rate."""

    kappa1: int = 5
    kappa2: int = 2
    lr: float = 0.01
    rounds: int = 100

    def __post_init__(self):
        if self.kappa1 < 1 or self.kappa2 < 1:
            raise ValueError("kappa1 and kappa2 must be at least 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def phase(self, kappa: int) -> str:
        if kappa % self.kappa1:
            return "local"
        if kappa % (self.kappa1 * self.kappa2):
            return "rsu"
        return "mbs"


@dataclass(frozen=True)
class Message:
    """Parameters exchanged between roles: arrays by name, plus the number
    of vehicles they average over."""

    sender: str
    receiver: str
    params: dict
    weight: int = 1


def average_messages(messages) -> dict:
    """Weighted mean of the parameter dicts carried by ``messages``."""
    messages = list(messages)
    if not messages:
        raise ValueError("nothing to average")
    names = list(messages[0].params)
    total = sum(m.weight for m in messages)
    out = {}
    for name in names:
        shapes = {np.shape(m.params[name]) for m in messages}
        if len(shapes) != 1:
            raise ValueError(f"parameter {name} has mismatched shapes {sorted(shapes)}")
        out[name] = sum(m.weight * np.asarray(m.params[name], dtype=np.float64) for m in messages) / total
    return out


class VehicleClient:
    """A vehicle's local model. The training data stays inside ``grad_fn``;
    only parameter dicts leave through :meth:`upload`."""

    def __init__(self, vehicle_id, params: dict, grad_fn):
        self.vehicle_id = vehicle_id
        self._params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        self._grad_fn = grad_fn

    @property
    def params(self) -> dict:
        return {k: v.copy() for k, v in self._params.items()}

    def local_step(self, lr: float):
        out = self._grad_fn(self.params)
        if out is None:
            return None
        loss, grad = out
        for k in self._params:
            self._params[k] = self._params[k] - lr * grad[k]
        return loss

    def upload(self, receiver: str) -> Message:
        return Message(f"vehicle:{self.vehicle_id}", receiver, self.params)

    def download(self, message: Message) -> None:
        for k, v in message.params.items():
            if np.shape(v) != self._params[k].shape:
                raise ValueError(f"downloaded {k} has shape {np.shape(v)}, expected {self._params[k].shape}")
            self._params[k] = np.array(v, dtype=np.float64)

    @classmethod
    def sasrec(cls, vehicle_id, params: SasrecParams, requests, targets: int = 5,
               num_negatives: int = 100, rng=None) -> "VehicleClient":
        """Client whose local step is one gradient of the loss on a random
        window of its own request sequence (file ids 1..F)."""
        rng = np.random.default_rng(rng)
        requests = np.asarray(requests, dtype=np.int64)
        n = params.positions
        F = params.file_count

        def grad_fn(p):
            if requests.size < 2:
                return None
            width = n + targets
            padded = np.concatenate([np.zeros(max(width - requests.size, 0), dtype=np.int64), requests])
            start = int(rng.integers(0, padded.size - width + 1))
            seq, tg = window_targets(padded[start:start + width], n, targets)
            if not any(tg):
                return None
            loss, g = sasrec_loss_grad(SasrecParams.from_dict(p), seq, tg, num_negatives=num_negatives, rng=rng)
            return loss, g.to_dict()

        return cls(vehicle_id, params.to_dict(), grad_fn)


def hfl_round(vehicles, rsu_of, cluster_of, schedule: HflSchedule, kappa: int,
              participants=None, log_messages=None):
    """One global step of hierarchical federated averaging.

    Parameters
    ----------
    vehicles : sequence of VehicleClient
    rsu_of : mapping vehicle_id -> 0-based RSU index it is attached to
    cluster_of : array, 0-based MBS index of every RSU
    kappa : global step counter, starting at 1
    participants : optional set of vehicle ids taking part; others keep
        their parameters and are left out of every mean
    log_messages : optional list receiving every inter-role Message

    Returns the list of local losses for local steps, otherwise ``[]``.
    """
    active = [v for v in vehicles if participants is None or v.vehicle_id in participants]
    phase = schedule.phase(kappa)
    if phase == "local":
        losses = [v.local_step(schedule.lr) for v in active]
        return [x for x in losses if x is not None]

    def record(msg):
        if log_messages is not None:
            log_messages.append(msg)
        return msg

    by_rsu = defaultdict(list)
    for v in active:
        by_rsu[int(rsu_of[v.vehicle_id])].append(v)
    for r in range(len(cluster_of)):
        if r not in by_rsu:
            warnings.warn(f"RSU {r} has no participating vehicles; skipped in aggregation",
                          RuntimeWarning, stacklevel=2)

    rsu_models = {}
    for r, members in sorted(by_rsu.items()):
        msgs = [record(v.upload(f"rsu:{r}")) for v in members]
        rsu_models[r] = (average_messages(msgs), len(members))

    if phase == "mbs":
        by_mbs = defaultdict(list)
        for r, (params, count) in rsu_models.items():
            m = int(cluster_of[r])
            by_mbs[m].append(record(Message(f"rsu:{r}", f"mbs:{m}", params, count)))
        for m, msgs in by_mbs.items():
            mean = average_messages(msgs)
            for r in (r for r in rsu_models if int(cluster_of[r]) == m):
                rsu_models[r] = (mean, rsu_models[r][1])
                record(Message(f"mbs:{m}", f"rsu:{r}", mean))

    for r, members in by_rsu.items():
        params = rsu_models[r][0]
        for v in members:
            v.download(record(Message(f"rsu:{r}", f"vehicle:{v.vehicle_id}", params)))
    return []


# -- baselines ------------------------------------------------------------

def frequency_demand(requests, file_count: int) -> np.ndarray:
    """Add-one smoothed request frequencies, one row per vehicle.

    ``requests`` is a sequence of per-vehicle file-id sequences (ids 1..F).
    """
    rows = []
    for seq in requests:
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size and (seq.min() < 1 or seq.max() > file_count):
            raise ValueError(f"file id out of range 1..{file_count}")
        counts = np.bincount(seq - 1, minlength=file_count) if seq.size else np.zeros(file_count)
        rows.append((counts + 1.0) / (seq.size + file_count))
    return np.clip(np.array(rows, dtype=np.float64).reshape(-1, file_count), 0.0, 1.0)


def oracle_demand(requests, file_count: int, horizon=None) -> np.ndarray:
    """Indicator of the files each vehicle actually requests.

    ``requests`` holds per-vehicle sequences of file ids, or of
    ``(slot, file_id)`` pairs when ``horizon`` is given, in which case only
    slots below ``horizon`` count.
    """
    out = np.zeros((len(requests), file_count))
    for v, seq in enumerate(requests):
        if horizon is not None:
            seq = [f for s, f in seq if s < horizon]
        for f in seq:
            if not 1 <= f <= file_count:
                raise ValueError(f"file id {f} out of range 1..{file_count}")
            out[v, f - 1] = 1.0
    return out


# -- file formats ---------------------------------------------------------

_CHECKPOINT_MAGIC = "# sasrec-checkpoint v1"


def save_checkpoint(params: SasrecParams, path) -> None:
    """Text checkpoint in a fixed layout.

    A magic line, then for each parameter a ``name rows cols ndim`` header
    followed by ``rows`` lines of row-major values printed with ``%.17g``,
    which round-trips 64-bit floats exactly. Vectors are stored as one
    column.
    """
    with open(path, "w") as fh:
        fh.write(_CHECKPOINT_MAGIC + "\n")
        for f in fields(params):
            arr = getattr(params, f.name)
            mat = arr.reshape(-1, 1) if arr.ndim == 1 else arr
            fh.write(f"{f.name} {mat.shape[0]} {mat.shape[1]} {arr.ndim}\n")
            for row in mat:
                fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_checkpoint(path) -> SasrecParams:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    out, k = {}, 1
    while k < len(lines):
        name, rows, cols, ndim = lines[k].split()
        rows, cols = int(rows), int(cols)
        mat = np.array([[float(x) for x in lines[k + 1 + i].split()] for i in range(rows)]).reshape(rows, cols)
        out[name] = mat.ravel() if int(ndim) == 1 else mat
        k += 1 + rows
    return SasrecParams.from_dict(out)


def read_request_csv(path) -> dict:
    """Read ``vehicle_id, slot, file_id`` rows; returns vehicle -> list of
    ``(slot, file_id)`` sorted by slot (stable within a slot)."""
    out = defaultdict(list)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = ["vehicle_id", "slot", "file_id"]
        if reader.fieldnames is None or [h.strip() for h in reader.fieldnames] != expected:
            raise ValueError(f"{path}: header must be {','.join(expected)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                v, s, f = (int(row[k]) for k in expected)
            except (TypeError, ValueError):
                raise ValueError(f"{path}:{lineno}: non-integer field") from None
            out[v].append((s, f))
    return {v: sorted(reqs, key=lambda p: p[0]) for v, reqs in out.items()}


def write_request_csv(requests, path) -> None:
    """Write vehicle -> ``(slot, file_id)`` pairs."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["vehicle_id", "slot", "file_id"])
        for v in sorted(requests):
            for s, f in requests[v]:
                writer.writerow([v, int(s), int(f)])
