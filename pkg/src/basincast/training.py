"""Data-parallel training with synchronized gradient averaging.

Every worker holds a full replica of the parameters, seeded identically,
and iterates mini-batches from its own contiguous chunk of the training
windows. After each batch the workers' gradients are averaged (weighted
by how many windows each one actually processed) and every replica
applies the same optimizer step, so parameters never drift apart and any
replica can be checkpointed. Worker 0 additionally scores the validation
split each epoch and keeps the best parameters.

Workers run as forked processes exchanging gradients with a coordinator
over pipes; a serial executor runs the identical schedule in one process
for debugging and exact-reproducibility tests.
"""

from __future__ import annotations

import hashlib
import json
import math
import multiprocessing as mp
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import NormState, WindowDataset, sequential_sampler
from .errors import (CheckpointError, DivergenceError, InvalidInputError,
                     ShapeError)
from .model import GraphTensors, ModelConfig, forward_batch, init_state


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 0.01
    weight_decay: float = 1e-4
    patience: int = 5
    num_workers: int = 1
    seed: int = 0
    executor: str = "process"
    check_synchrony: bool = False

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.patience,
               self.num_workers) < 1:
            raise InvalidInputError(
                "epochs, batch_size, patience, num_workers must be >= 1")
        if self.lr <= 0:
            raise InvalidInputError("learning rate must be positive")
        if self.executor not in ("process", "serial"):
            raise InvalidInputError(f"unknown executor {self.executor!r}")

    def to_json_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "lr": self.lr, "weight_decay": self.weight_decay,
                "patience": self.patience, "num_workers": self.num_workers,
                "seed": self.seed, "executor": self.executor}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TrainConfig":
        try:
            return cls(epochs=int(doc["epochs"]),
                       batch_size=int(doc["batch_size"]), lr=float(doc["lr"]),
                       weight_decay=float(doc["weight_decay"]),
                       patience=int(doc["patience"]),
                       num_workers=int(doc["num_workers"]),
                       seed=int(doc["seed"]),
                       executor=str(doc.get("executor", "process")))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidInputError(f"malformed train config: {exc}")


@dataclass
class GradientBundle:
    grads: dict
    sample_count: int


def masked_loss(pred, target) -> ad.Tensor:
    """Mean squared error over every target-by-lead entry."""
    pred = ad.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError("masked_loss", pred.shape, target.shape)
    diff = ad.sub(pred, target)
    return ad.mean(ad.mul(diff, diff))


def allreduce_average(bundles: list) -> GradientBundle:
    """Sample-count weighted mean of gradient bundles, reduced in order."""
    if not bundles:
        raise InvalidInputError("nothing to reduce")
    keys = sorted(bundles[0].grads)
    total = sum(b.sample_count for b in bundles)
    if total <= 0:
        raise InvalidInputError("no samples behind any gradient bundle")
    for b in bundles[1:]:
        if sorted(b.grads) != keys:
            raise InvalidInputError("gradient bundles disagree on parameters")
    out = {}
    for k in keys:
        shape = bundles[0].grads[k].shape
        acc = np.zeros(shape)
        for b in bundles:
            if b.grads[k].shape != shape:
                raise InvalidInputError(f"gradient shape mismatch for {k!r}")
            if b.sample_count:
                acc += b.grads[k] * b.sample_count
        out[k] = acc / total
    return GradientBundle(out, total)


def state_values(state: dict) -> dict:
    return {k: t.values.copy() for k, t in state.items()}


def state_from_values(values: dict) -> dict:
    return {k: ad.parameter(v.copy()) for k, v in values.items()}


def param_hash(state: dict) -> str:
    digest = hashlib.blake2b(digest_size=16)
    for name in sorted(state):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(state[name].values).tobytes())
    return digest.hexdigest()


class _Replica:
    """One worker's parameters, optimizer, and chunk of the training data."""

    def __init__(self, worker_id: int, train_ds: WindowDataset,
                 gt: GraphTensors, mcfg: ModelConfig, tcfg: TrainConfig):
        self.worker_id = worker_id
        self.ds = train_ds
        self.gt = gt
        self.mcfg = mcfg
        self.tcfg = tcfg
        self.state = init_state(mcfg, np.random.default_rng(tcfg.seed))
        self.opt = ad.AdamW(self.state, lr=tcfg.lr,
                            weight_decay=tcfg.weight_decay)
        self.chunk = sequential_sampler(len(train_ds), tcfg.num_workers,
                                        worker_id)
        self.dropout_rng = np.random.default_rng((tcfg.seed, worker_id))
        # worker 0 owns the largest chunk, so every worker counts the same
        # number of sync rounds from its own copy of the schedule
        largest = len(sequential_sampler(len(train_ds), tcfg.num_workers, 0))
        self.rounds_per_epoch = math.ceil(largest / tcfg.batch_size)

    def batch_gradients(self, round_idx: int) -> tuple[GradientBundle, float]:
        lo = self.chunk.start + round_idx * self.tcfg.batch_size
        hi = min(lo + self.tcfg.batch_size, self.chunk.stop)
        if lo >= hi:
            zeros = {k: np.zeros_like(t.values)
                     for k, t in self.state.items()}
            return GradientBundle(zeros, 0), 0.0
        x, rain, y = self.ds.batch(range(lo, hi))
        pred, _ = forward_batch(x, rain, self.gt, self.state, self.mcfg,
                                training=True, rng=self.dropout_rng)
        loss = masked_loss(pred, y)
        grads = ad.backward(loss, self.state.values())
        named = {k: grads[t] for k, t in self.state.items()}
        return GradientBundle(named, hi - lo), float(loss.values)

    def apply(self, avg: GradientBundle) -> None:
        self.opt.step(avg.grads)

    def dataset_loss(self, ds: WindowDataset) -> float:
        total, count = 0.0, 0
        for lo in range(0, len(ds), self.tcfg.batch_size):
            hi = min(lo + self.tcfg.batch_size, len(ds))
            x, rain, y = ds.batch(range(lo, hi))
            pred, _ = forward_batch(x, rain, self.gt, self.state, self.mcfg)
            total += float(masked_loss(pred, y).values) * (hi - lo)
            count += hi - lo
        return total / count


class _EarlyStopper:
    """Stops once validation fails to improve for `patience` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Returns True when this epoch is a new best."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


def _train_serial(train_ds, val_ds, gt, mcfg, tcfg, on_epoch=None):
    replicas = [_Replica(w, train_ds, gt, mcfg, tcfg)
                for w in range(tcfg.num_workers)]
    stopper = _EarlyStopper(tcfg.patience)
    history = []
    best_values = state_values(replicas[0].state)
    for epoch in range(tcfg.epochs):
        started = time.perf_counter()
        loss_sum, seen = 0.0, 0
        for round_idx in range(replicas[0].rounds_per_epoch):
            bundles = []
            for rep in replicas:
                bundle, loss = rep.batch_gradients(round_idx)
                if not math.isfinite(loss):
                    raise DivergenceError(epoch, round_idx, loss)
                bundles.append(bundle)
                loss_sum += loss * bundle.sample_count
                seen += bundle.sample_count
            avg = allreduce_average(bundles)
            for rep in replicas:
                rep.apply(avg)
            if tcfg.check_synchrony:
                hashes = {param_hash(rep.state) for rep in replicas}
                if len(hashes) != 1:
                    raise InvalidInputError(
                        f"replicas desynchronized at epoch {epoch}")
        val_loss = replicas[0].dataset_loss(val_ds)
        if not math.isfinite(val_loss):
            raise DivergenceError(epoch, -1, val_loss)
        if stopper.update(epoch, val_loss):
            best_values = state_values(replicas[0].state)
        history.append({"epoch": epoch, "train_loss": loss_sum / seen,
                        "val_loss": val_loss,
                        "seconds": time.perf_counter() - started})
        if on_epoch is not None:
            on_epoch(history[-1])
        if stopper.should_stop:
            break
    return state_from_values(best_values), history


def _worker_main(worker_id, conn, train_ds, val_ds, gt, mcfg, tcfg):
    try:
        rep = _Replica(worker_id, train_ds, gt, mcfg, tcfg)
        stopper = _EarlyStopper(tcfg.patience)
        best_values = state_values(rep.state)
        for epoch in range(tcfg.epochs):
            for round_idx in range(rep.rounds_per_epoch):
                bundle, loss = rep.batch_gradients(round_idx)
                conn.send(("grad", bundle.grads, bundle.sample_count, loss))
                message = conn.recv()
                if message[0] == "abort":
                    return
                rep.apply(GradientBundle(message[1], message[2]))
                if tcfg.check_synchrony:
                    conn.send(("hash", param_hash(rep.state)))
            val_loss = rep.dataset_loss(val_ds) if worker_id == 0 else None
            if worker_id == 0 and stopper.update(epoch, val_loss):
                best_values = state_values(rep.state)
            conn.send(("epoch_end", val_loss))
            message = conn.recv()
            if message[0] == "stop":
                break
        if worker_id == 0:
            conn.send(("best", best_values))
    except Exception as exc:  # surfaced by the coordinator
        conn.send(("error", repr(exc)))
    finally:
        conn.close()


def _train_process(train_ds, val_ds, gt, mcfg, tcfg, on_epoch=None):
    ctx = mp.get_context("fork")
    pipes, workers = [], []
    for w in range(tcfg.num_workers):
        parent_conn, child_conn = ctx.Pipe()
        proc = ctx.Process(target=_worker_main,
                           args=(w, child_conn, train_ds, val_ds, gt,
                                 mcfg, tcfg),
                           daemon=True)
        proc.start()
        child_conn.close()
        pipes.append(parent_conn)
        workers.append(proc)

    def fail(exc):
        for conn in pipes:
            try:
                conn.send(("abort",))
            except (BrokenPipeError, OSError):
                pass
        for proc in workers:
            proc.terminate()
            proc.join()
        raise exc

    def recv(conn):
        msg = conn.recv()
        if msg[0] == "error":
            fail(RuntimeError(f"worker failed: {msg[1]}"))
        return msg

    rounds = math.ceil(len(sequential_sampler(len(train_ds),
                                              tcfg.num_workers, 0))
                       / tcfg.batch_size)
    stopper = _EarlyStopper(tcfg.patience)
    history = []
    try:
        for epoch in range(tcfg.epochs):
            started = time.perf_counter()
            loss_sum, seen = 0.0, 0
            for round_idx in range(rounds):
                bundles = []
                for conn in pipes:
                    kind, grads, count, loss = recv(conn)
                    if not math.isfinite(loss):
                        fail(DivergenceError(epoch, round_idx, loss))
                    bundles.append(GradientBundle(grads, count))
                    loss_sum += loss * count
                    seen += count
                avg = allreduce_average(bundles)
                for conn in pipes:
                    conn.send(("step", avg.grads, avg.sample_count))
                if tcfg.check_synchrony:
                    hashes = {recv(conn)[1] for conn in pipes}
                    if len(hashes) != 1:
                        fail(InvalidInputError(
                            f"replicas desynchronized at epoch {epoch}"))
            val_loss = None
            for conn in pipes:
                kind, reported = recv(conn)
                if reported is not None:
                    val_loss = reported
            if not math.isfinite(val_loss):
                fail(DivergenceError(epoch, -1, val_loss))
            stopper.update(epoch, val_loss)
            history.append({"epoch": epoch, "train_loss": loss_sum / seen,
                            "val_loss": val_loss,
                            "seconds": time.perf_counter() - started})
            if on_epoch is not None:
                on_epoch(history[-1])
            stop = stopper.should_stop or epoch == tcfg.epochs - 1
            for conn in pipes:
                conn.send(("stop",) if stop else ("continue",))
            if stop:
                break
        kind, best_values = recv(pipes[0])
        for proc in workers:
            proc.join(timeout=30)
    except (EOFError, BrokenPipeError) as exc:
        fail(RuntimeError(f"lost contact with a worker: {exc}"))
    return state_from_values(best_values), history


def train(train_ds: WindowDataset, val_ds: WindowDataset, graph,
          mcfg: ModelConfig, tcfg: TrainConfig,
          on_epoch=None) -> tuple[dict, list]:
    """Run the full training schedule; returns (best state, history).

    `graph` may be a BasinGraph or prebuilt GraphTensors. History rows
    carry epoch, train loss, validation loss, and wall seconds;
    `on_epoch` (if given) receives each row as it completes.
    """
    if len(train_ds) < tcfg.num_workers:
        raise InvalidInputError(
            f"{tcfg.num_workers} workers need at least that many windows, "
            f"have {len(train_ds)}")
    gt = graph if isinstance(graph, GraphTensors) else GraphTensors.from_graph(graph)
    if tcfg.executor == "serial" or tcfg.num_workers == 1:
        return _train_serial(train_ds, val_ds, gt, mcfg, tcfg, on_epoch)
    return _train_process(train_ds, val_ds, gt, mcfg, tcfg, on_epoch)


def write_history_csv(history: list, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,seconds\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['train_loss']!r},"
                     f"{row['val_loss']!r},{row['seconds']:.3f}\n")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def checkpoint_save(state: dict, norm_state: NormState, mcfg: ModelConfig,
                    stem) -> None:
    """Write `<stem>.json` (manifest) and `<stem>.bin` (parameter blob).

    The blob is the little-endian float64 concatenation of every
    parameter in manifest order.
    """
    stem = str(stem)
    names = sorted(state)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": mcfg.to_json_dict(),
        "norm_state": norm_state.to_json_dict(),
        "params": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    with open(stem + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")
    with open(stem + ".bin", "wb") as fh:
        for n in names:
            fh.write(np.ascontiguousarray(state[n].values,
                                          dtype="<f8").tobytes())


def checkpoint_load(stem) -> tuple[dict, NormState, ModelConfig]:
    stem = str(stem)
    try:
        with open(stem + ".json") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}")
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {manifest.get('format_version')}")
    try:
        mcfg = ModelConfig.from_json_dict(manifest["model_config"])
        norm_state = NormState.from_json_dict(manifest["norm_state"])
        entries = [(p["name"], tuple(int(s) for s in p["shape"]))
                   for p in manifest["params"]]
    except (KeyError, TypeError, InvalidInputError) as exc:
        raise CheckpointError(f"malformed manifest: {exc}")
    try:
        blob = open(stem + ".bin", "rb").read()
    except OSError as exc:
        raise CheckpointError(f"unreadable parameter blob: {exc}")
    expected = sum(int(np.prod(shape)) for _, shape in entries) * 8
    if len(blob) != expected:
        raise CheckpointError(
            f"blob holds {len(blob)} bytes, manifest implies {expected}")
    state = {}
    offset = 0
    for name, shape in entries:
        size = int(np.prod(shape))
        flat = np.frombuffer(blob, dtype="<f8", count=size,
                             offset=offset).astype(np.float64)
        state[name] = ad.parameter(flat.reshape(shape))
        offset += size * 8
    return state, norm_state, mcfg
