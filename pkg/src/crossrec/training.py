"""Three-phase training schedule and checkpointing.

Phase 1 pretrains the recommender on unfiltered data, with one loss and one
optimizer per domain so neither domain's progress can bleed into the
other's accumulators. Phase 2 freezes the recommender and pretrains the
transfer filter with Monte-Carlo policy gradients accumulated over the
whole corpus and applied once per epoch. Phase 3 alternates, per epoch:
policy gradients folded in through a soft update (a convex blend of the old
policy and the freshly stepped candidate), then one recommender epoch over
the greedily filtered sequences at the joint learning rates.

Checkpoints are a self-describing binary dump (json header + raw array
bytes) that round-trips bitwise, including optimizer accumulators and the
training RNG state, so a resumed run replays the uninterrupted one exactly.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import TrainConfig, config_from_dict, config_to_dict
from .data import Catalog, Dataset, TrainingInstance, pad_left
from .domain_filter import (MODE_FULL, MODE_GREEDY, EpisodeTrace,
                            PolicyParams, make_episode_context,
                            policy_gradients, sample_episode, soft_update)
from .numerics import NumericsError, make_optimizer
from .recommender import ModelParams, loss_and_grads

MAGIC = b"CROSSREC-CKPT-1\n"

PHASES = ("pretrain", "filter", "joint")


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint."""


@dataclass
class TrainReportRow:
    phase: str
    epoch: int
    loss_a: float = 0.0
    loss_b: float = 0.0
    mean_reward: float = 0.0
    frac_revised: float = 0.0
    frac_dropped: float = 0.0
    wall_clock_s: float = 0.0
    timestamp: str = ""
    metrics: dict[str, float] = field(default_factory=dict)


REPORT_COLUMNS = ["phase", "epoch", "loss_a", "loss_b", "mean_reward",
                  "frac_revised", "frac_dropped",
                  "hr_a", "ndcg_a", "hr_b", "ndcg_b"]


def report_to_csv(rows: list[TrainReportRow]) -> str:
    """Fixed-column CSV. Wall-clock and timestamps are deliberately left to
    the stderr log: output files must be bitwise reproducible under a fixed
    seed, and timings never are."""
    out = [",".join(REPORT_COLUMNS)]
    for r in rows:
        cells = [r.phase, str(r.epoch), repr(r.loss_a), repr(r.loss_b),
                 repr(r.mean_reward), repr(r.frac_revised),
                 repr(r.frac_dropped)]
        for key in REPORT_COLUMNS[7:]:
            cells.append(repr(r.metrics[key]) if key in r.metrics else "")
        out.append(",".join(cells))
    return "\n".join(out) + "\n"


def data_rng(seed: int) -> np.random.Generator:
    """Stream used for dataset construction (negative sampling). Kept apart
    from the training stream so a resumed run can rebuild the exact same
    instances from the corpus file."""
    return np.random.default_rng([seed, 101])


def train_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 202])


def _batches(n: int, size: int):
    for lo in range(0, n, size):
        yield range(lo, min(lo + size, n))


def _pad_batch(instances: list[TrainingInstance]) -> list[TrainingInstance]:
    """Pad every history in the batch to the batch maximum. Padding slots
    embed to zero rows, so this changes nothing numerically; it realizes the
    fixed-length batch layout."""
    lh = max(len(i.history) for i in instances)
    lt = max((len(i.transferred) for i in instances), default=0)
    out = []
    for i in instances:
        out.append(TrainingInstance(
            account_id=i.account_id, domain=i.domain,
            history=pad_left(i.history, lh),
            history_pos=pad_left(i.history_pos, lh),
            transferred=pad_left(i.transferred, lt),
            transferred_pos=pad_left(i.transferred_pos, lt),
            transferred_event_idx=i.transferred_event_idx,
            query=i.query, target=i.target, negatives=i.negatives,
            is_test=i.is_test))
    return out


class Trainer:
    """Owns the model, the filter policies, their optimizers, the training
    RNG, and the per-epoch report."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset,
                 rng: np.random.Generator | None = None):
        cfg.validate()
        self.cfg = cfg
        self.dataset = dataset
        self.rng = rng if rng is not None else train_rng(cfg.seed)
        self.model = ModelParams.init(self.rng, dataset.catalog, cfg)
        self.policies = PolicyParams.init(self.rng, cfg.embed_dim,
                                          cfg.policy_hidden)
        self.opt_theta: dict[str, object] | None = None
        self.opt_phi = None
        self.progress = {p: 0 for p in PHASES}
        self.report: list[TrainReportRow] = []
        self.log_stream = sys.stderr

    # ------------------------------------------------------------------ util

    def _log(self, msg: str) -> None:
        print(msg, file=self.log_stream)

    def _by_domain(self, instances: list[TrainingInstance]):
        return {d: [i for i in instances if i.domain == d] for d in ("A", "B")}

    def _finish_row(self, row: TrainReportRow, t0: float) -> None:
        row.wall_clock_s = time.perf_counter() - t0
        row.timestamp = datetime.now(timezone.utc).isoformat()
        self.report.append(row)
        self._log(f"[{row.phase}] epoch {row.epoch} "
                  f"loss A={row.loss_a:.4f} B={row.loss_b:.4f} "
                  f"reward={row.mean_reward:.4f} revised={row.frac_revised:.2f} "
                  f"dropped={row.frac_dropped:.2f} ({row.wall_clock_s:.1f}s "
                  f"at {row.timestamp})")

    def _recommender_epoch(self, instances: list[TrainingInstance],
                           phase: str, epoch: int) -> tuple[float, float]:
        """One pass of per-domain batched gradient steps. Returns the mean
        batch loss per domain."""
        by_dom = self._by_domain(instances)
        losses = {"A": 0.0, "B": 0.0}
        for dom in ("A", "B"):
            pool = by_dom[dom]
            if not pool:
                continue
            order = self.rng.permutation(len(pool))
            batch_losses = []
            for idx in _batches(len(pool), self.cfg.batch_size):
                batch = _pad_batch([pool[j] for j in order[list(idx)]])
                loss, grads = loss_and_grads(self.model, batch, dom,
                                             dropout=self.cfg.dropout,
                                             rng=self.rng)
                if not np.isfinite(loss):
                    raise NumericsError(
                        f"loss diverged: phase={phase} epoch={epoch} "
                        f"domain={dom} loss={loss}")
                self.opt_theta[dom].step(self.model.tensors, grads)
                batch_losses.append(loss)
            losses[dom] = float(np.mean(batch_losses))
        return losses["A"], losses["B"]

    def _sample_corpus_episodes(self) -> tuple[list[EpisodeTrace], dict]:
        """J episodes per filterable training instance, plus summary stats."""
        traces: list[EpisodeTrace] = []
        n_items = 0
        n_dropped = 0
        for inst in self.dataset.train:
            if not inst.transferred:
                continue
            ctx = make_episode_context(self.model, inst)
            for _ in range(self.cfg.n_episode_samples):
                tr = sample_episode(self.rng, self.policies, self.model, inst,
                                    mode=self.cfg.filter_mode,
                                    greedy_mu=(self.cfg.greedy_mu1,
                                               self.cfg.greedy_mu2),
                                    ctx=ctx)
                traces.append(tr)
                if tr.high_action == 1 and tr.kept_mask:
                    n_items += len(tr.kept_mask)
                    n_dropped += sum(1 for k in tr.kept_mask if k == 0)
        if not traces:
            stats = {"mean_reward": 0.0, "frac_revised": 0.0,
                     "frac_dropped": 0.0}
            return traces, stats
        stats = {
            "mean_reward": float(np.mean([t.total_reward() for t in traces])),
            "frac_revised": float(np.mean(
                [1.0 if t.high_action == 1 else 0.0 for t in traces])),
            "frac_dropped": n_dropped / n_items if n_items else 0.0,
        }
        return traces, stats

    def filtered_train_instances(self) -> tuple[list[TrainingInstance], dict]:
        """Greedy (max-probability) filtering of every training instance with
        the current policies; what the recommender trains on in the joint
        phase."""
        out: list[TrainingInstance] = []
        revised = 0
        filterable = 0
        n_items = 0
        n_dropped = 0
        for inst in self.dataset.train:
            if not inst.transferred:
                out.append(inst)
                continue
            filterable += 1
            trace = sample_episode(None, self.policies, self.model, inst,
                                   mode=self.cfg.filter_mode, greedy=True,
                                   greedy_mu=(self.cfg.greedy_mu1,
                                              self.cfg.greedy_mu2),
                                   compute_rewards=False)
            if trace.high_action == 1:
                revised += 1
                n_items += len(trace.kept_mask)
                n_dropped += sum(1 for k in trace.kept_mask if k == 0)
            out.append(trace.revised(inst))
        stats = {"frac_revised": revised / filterable if filterable else 0.0,
                 "frac_dropped": n_dropped / n_items if n_items else 0.0}
        return out, stats

    # ---------------------------------------------------------------- phases

    def pretrain_recommender(self, epochs: int | None = None) -> None:
        """Phase 1: train the recommender on the original, unfiltered data."""
        epochs = self.cfg.epochs_pretrain if epochs is None else epochs
        if self.opt_theta is None:
            self.opt_theta = {
                d: make_optimizer(self.cfg.optimizer, self.cfg.lr_pretrain)
                for d in ("A", "B")}
        while self.progress["pretrain"] < epochs:
            t0 = time.perf_counter()
            epoch = self.progress["pretrain"] + 1
            loss_a, loss_b = self._recommender_epoch(self.dataset.train,
                                                     "pretrain", epoch)
            self.progress["pretrain"] = epoch
            self._finish_row(TrainReportRow("pretrain", epoch, loss_a, loss_b),
                             t0)

    def pretrain_filter(self, epochs: int | None = None) -> None:
        """Phase 2: policy-gradient ascent on the filter with the recommender
        frozen. One accumulated update per epoch, no soft blending here."""
        epochs = self.cfg.epochs_filter if epochs is None else epochs
        if self.opt_phi is None:
            self.opt_phi = make_optimizer("adam", self.cfg.lr_filter_pretrain)
        while self.progress["filter"] < epochs:
            t0 = time.perf_counter()
            epoch = self.progress["filter"] + 1
            traces, stats = self._sample_corpus_episodes()
            if traces:
                grads = policy_gradients(self.policies, traces)
                self.opt_phi.step(self.policies.tensors,
                                  {k: -g for k, g in grads.items()})
            row = TrainReportRow("filter", epoch, **{
                "mean_reward": stats["mean_reward"],
                "frac_revised": stats["frac_revised"],
                "frac_dropped": stats["frac_dropped"]})
            self.progress["filter"] = epoch
            self._finish_row(row, t0)

    def joint_train(self, epochs: int | None = None) -> None:
        """Phase 3: per epoch, fold the policy-gradient step in through a
        soft update, then run one recommender epoch over the greedily
        filtered sequences at the joint learning rates."""
        epochs = self.cfg.epochs_joint if epochs is None else epochs
        if self.progress["joint"] == 0:
            self.opt_theta = {
                d: make_optimizer(self.cfg.optimizer, self.cfg.lr_joint)
                for d in ("A", "B")}
            self.opt_phi = make_optimizer("adam", self.cfg.lr_filter_joint)
        elif self.opt_phi is None or self.opt_theta is None:
            raise CheckpointError("joint phase resumed without optimizers")
        while self.progress["joint"] < epochs:
            t0 = time.perf_counter()
            epoch = self.progress["joint"] + 1
            traces, stats = self._sample_corpus_episodes()
            if traces:
                grads = policy_gradients(self.policies, traces)
                candidate = self.policies.clone()
                self.opt_phi.step(candidate.tensors,
                                  {k: -g for k, g in grads.items()})
                self.policies = soft_update(self.policies, candidate,
                                            self.cfg.soft_update_rate)
            filtered, _ = self.filtered_train_instances()
            loss_a, loss_b = self._recommender_epoch(filtered, "joint", epoch)
            row = TrainReportRow("joint", epoch, loss_a, loss_b,
                                 stats["mean_reward"], stats["frac_revised"],
                                 stats["frac_dropped"])
            self.progress["joint"] = epoch
            self._finish_row(row, t0)

    def run_all(self) -> None:
        self.pretrain_recommender()
        self.pretrain_filter()
        self.joint_train()

    # ---------------------------------------------------------- checkpointing

    def save(self, path) -> None:
        arrays: dict[str, np.ndarray] = {}
        arrays.update({f"model.{k}": v for k, v in self.model.tensors.items()})
        arrays.update({f"policy.{k}": v
                       for k, v in self.policies.tensors.items()})
        opt_meta: dict[str, dict] = {}
        if self.opt_theta is not None:
            for dom, opt in self.opt_theta.items():
                opt_meta[f"theta.{dom}"] = {"kind": opt.kind, "lr": opt.lr,
                                            "t": opt.t}
                arrays.update({f"opt.theta.{dom}.{k}": v
                               for k, v in opt.state_arrays().items()})
        if self.opt_phi is not None:
            opt_meta["phi"] = {"kind": self.opt_phi.kind,
                               "lr": self.opt_phi.lr, "t": self.opt_phi.t}
            arrays.update({f"opt.phi.{k}": v
                           for k, v in self.opt_phi.state_arrays().items()})
        names = sorted(arrays)
        header = {
            "version": 1,
            "config": config_to_dict(self.cfg),
            "catalog": {"n_items_a": self.dataset.catalog.n_items_a,
                        "n_items_b": self.dataset.catalog.n_items_b},
            "progress": self.progress,
            "rng": self.rng.bit_generator.state,
            "opt_meta": opt_meta,
            "arrays": [[n, list(arrays[n].shape), str(arrays[n].dtype)]
                       for n in names],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            for n in names:
                fh.write(np.ascontiguousarray(arrays[n]).tobytes())

    @classmethod
    def load(cls, path, dataset: Dataset) -> "Trainer":
        header, raw, off = _read_header(path)
        cfg = config_from_dict(TrainConfig, header["config"])
        cat = header["catalog"]
        if (cat["n_items_a"], cat["n_items_b"]) != (
                dataset.catalog.n_items_a, dataset.catalog.n_items_b):
            raise CheckpointError(
                f"catalog mismatch: checkpoint {cat} vs dataset "
                f"{dataset.catalog}")
        arrays: dict[str, np.ndarray] = {}
        for name, shape, dtype in header["arrays"]:
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * np.dtype(dtype).itemsize
            if off + nbytes > len(raw):
                raise CheckpointError(f"truncated array data at '{name}'")
            arrays[name] = np.frombuffer(
                raw[off:off + nbytes], dtype=dtype).reshape(shape).copy()
            off += nbytes
        if off != len(raw):
            raise CheckpointError("trailing bytes after array data")

        trainer = cls(cfg, dataset, rng=train_rng(cfg.seed))
        for k, v in trainer.model.tensors.items():
            stored = arrays.get(f"model.{k}")
            if stored is None or stored.shape != v.shape:
                raise CheckpointError(f"model tensor shape mismatch for '{k}'")
            trainer.model.tensors[k] = stored
        for k, v in trainer.policies.tensors.items():
            stored = arrays.get(f"policy.{k}")
            if stored is None or stored.shape != v.shape:
                raise CheckpointError(f"policy tensor shape mismatch for '{k}'")
            trainer.policies.tensors[k] = stored
        meta = header["opt_meta"]
        if any(k.startswith("theta.") for k in meta):
            trainer.opt_theta = {}
            for dom in ("A", "B"):
                m = meta[f"theta.{dom}"]
                opt = make_optimizer(m["kind"], m["lr"])
                opt.t = m["t"]
                prefix = f"opt.theta.{dom}."
                opt.load_state_arrays({k[len(prefix):]: v
                                       for k, v in arrays.items()
                                       if k.startswith(prefix)})
                trainer.opt_theta[dom] = opt
        if "phi" in meta:
            m = meta["phi"]
            opt = make_optimizer(m["kind"], m["lr"])
            opt.t = m["t"]
            opt.load_state_arrays({k[len("opt.phi."):]: v
                                   for k, v in arrays.items()
                                   if k.startswith("opt.phi.")})
            trainer.opt_phi = opt
        trainer.progress = {p: int(header["progress"][p]) for p in PHASES}
        state = header["rng"]
        state["state"] = {k: int(v) for k, v in state["state"].items()}
        trainer.rng.bit_generator.state = state
        return trainer


def _read_header(path) -> tuple[dict, bytes, int]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if not raw.startswith(MAGIC):
        raise CheckpointError("bad magic: not a checkpoint file")
    off = len(MAGIC)
    blob_len = int.from_bytes(raw[off:off + 8], "little")
    off += 8
    try:
        header = json.loads(raw[off:off + blob_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    if header.get("version") != 1:
        raise CheckpointError(
            f"unsupported checkpoint version {header.get('version')}")
    return header, raw, off + blob_len


def read_checkpoint_config(path) -> TrainConfig:
    """Config stored in a checkpoint, without loading any tensors."""
    header, _, _ = _read_header(path)
    return config_from_dict(TrainConfig, header["config"])
