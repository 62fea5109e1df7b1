"""Corpus handling: loading/saving account sequences, train/test target
splitting, padding, negative sampling, and a synthetic shared-account
corpus generator.

Corpus text format, one account per line::

    <account_id>\t<domain>:<item_id> <domain>:<item_id> ...

with domain in {A, B}, item ids positive integers, and events in
chronological order left to right. Item id 0 is reserved for padding in
both domains.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .config import GeneratorConfig

DOMAINS = ("A", "B")
PAD = 0


class ParseError(ValueError):
    """Malformed corpus file."""


class SamplingError(ValueError):
    """Not enough candidates to sample from."""


class Event(NamedTuple):
    domain: str
    item: int


class EventTruth(NamedTuple):
    """Generator-side provenance of one event (never fed to the model)."""
    user: int
    noise: bool


@dataclass
class Catalog:
    n_items_a: int
    n_items_b: int

    def size(self, domain: str) -> int:
        return self.n_items_a if domain == "A" else self.n_items_b


@dataclass
class AccountSequence:
    account_id: str
    events: list[Event]


def other_domain(domain: str) -> str:
    return "B" if domain == "A" else "A"


def load_corpus(path) -> tuple[Catalog, list[AccountSequence]]:
    """Parse a corpus file. Catalog sizes are the max item index seen per
    domain; an empty file yields an empty corpus with zero-size catalogs.
    """
    sequences: list[AccountSequence] = []
    max_item = {"A": 0, "B": 0}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ParseError(f"missing tab separator at line {lineno}")
        account_id, _, rest = line.partition("\t")
        events: list[Event] = []
        for token in rest.split():
            dom, sep, item_s = token.partition(":")
            if not sep:
                raise ParseError(f"malformed event {token!r} at line {lineno}")
            if dom not in DOMAINS:
                raise ParseError(f"unknown domain '{dom}' at line {lineno}")
            try:
                item = int(item_s)
            except ValueError:
                raise ParseError(f"bad item id {item_s!r} at line {lineno}") from None
            if item <= 0:
                raise ParseError(f"item ids must be >= 1 at line {lineno}")
            events.append(Event(dom, item))
            max_item[dom] = max(max_item[dom], item)
        if not events:
            raise ParseError(f"account '{account_id}' has no events at line {lineno}")
        sequences.append(AccountSequence(account_id, events))
    return Catalog(max_item["A"], max_item["B"]), sequences


def save_corpus(path, sequences: list[AccountSequence]) -> None:
    lines = []
    for seq in sequences:
        body = " ".join(f"{e.domain}:{e.item}" for e in seq.events)
        lines.append(f"{seq.account_id}\t{body}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""),
                          encoding="utf-8")


class DomainSplit(NamedTuple):
    """Leave-last-two-out split of one domain's subsequence."""
    train_history: list[int]
    train_target: int
    test_history: list[int]
    test_target: int


def split_targets(seq: AccountSequence) -> dict[str, DomainSplit]:
    """Per domain: last item is the test target, second-to-last the train
    target; the test history therefore includes the train target. Domains
    with fewer than 3 items are skipped (absent from the result).
    """
    out: dict[str, DomainSplit] = {}
    for dom in DOMAINS:
        items = [e.item for e in seq.events if e.domain == dom]
        if len(items) < 3:
            continue
        out[dom] = DomainSplit(
            train_history=items[:-2],
            train_target=items[-2],
            test_history=items[:-1],
            test_target=items[-1],
        )
    return out


def pad_left(history: list[int], target_len: int) -> list[int]:
    """Left-pad with 0 up to ``target_len``; histories that are too long are
    truncated keeping the most recent (rightmost) items."""
    if len(history) > target_len:
        return list(history[len(history) - target_len:])
    return [PAD] * (target_len - len(history)) + list(history)


def sample_negatives(rng: np.random.Generator, catalog_size: int,
                     observed: set[int], n: int) -> list[int]:
    """Draw n distinct items uniformly from {1..catalog_size} minus the
    observed set. The padding index is never produced."""
    if n == 0:
        return []
    candidates = np.setdiff1d(np.arange(1, catalog_size + 1),
                              np.fromiter(observed, dtype=np.int64, count=len(observed)))
    if candidates.size < n:
        raise SamplingError(
            f"need {n} negatives but only {candidates.size} unobserved items")
    return [int(x) for x in rng.choice(candidates, size=n, replace=False)]


@dataclass
class TrainingInstance:
    """One (account, domain, target) prediction task.

    ``query`` is the item whose embedding supervises the attention over
    latent users: the target itself for training instances, the most recent
    history item for test instances (the true test target stays hidden).
    Position ids index each retained event's rank in the account's mixed
    two-domain timeline, renumbered within the retained window.
    ``transferred_event_idx`` records which original events the transferred
    items came from, for episode auditing and generator diagnostics.
    """
    account_id: str
    domain: str
    history: list[int]
    history_pos: list[int]
    transferred: list[int]
    transferred_pos: list[int]
    transferred_event_idx: list[int]
    query: int
    target: int
    negatives: list[int]
    is_test: bool = False


@dataclass
class Dataset:
    catalog: Catalog
    train: list[TrainingInstance]
    test: list[TrainingInstance]
    skipped: dict[str, int] = field(default_factory=dict)


def _windowed(own: list[tuple[int, int]], other: list[tuple[int, int]],
              max_len: int) -> tuple[list, list, list, list, list]:
    """Keep the most recent ``max_len`` events per side and renumber the
    union's positions by chronological rank so they stay inside the
    positional table."""
    own = own[-max_len:]
    other = other[-max_len:]
    order = sorted(range(len(own) + len(other)),
                   key=lambda i: (own + other)[i][0])
    rank = {idx: r for r, idx in enumerate(order)}
    own_items = [it for _, it in own]
    own_pos = [rank[i] for i in range(len(own))]
    other_items = [it for _, it in other]
    other_pos = [rank[len(own) + i] for i in range(len(other))]
    other_orig = [p for p, _ in other]
    return own_items, own_pos, other_items, other_pos, other_orig


def build_instances(catalog: Catalog, sequences: list[AccountSequence],
                    rng: np.random.Generator, n_negatives: int = 4,
                    max_seq_len: int = 50) -> Dataset:
    """Turn raw sequences into per-domain train and test instances.

    The transferred (other-domain) history of an instance contains events
    strictly before the instance's target event in the mixed timeline. For
    train instances the other domain's final event is additionally excluded:
    it is that domain's held-out test target and must never appear in any
    training input.
    """
    train: list[TrainingInstance] = []
    test: list[TrainingInstance] = []
    skipped = {d: 0 for d in DOMAINS}
    for seq in sequences:
        splits = split_targets(seq)
        for dom in DOMAINS:
            if dom not in splits:
                skipped[dom] += 1
                continue
            sp = splits[dom]
            other = other_domain(dom)
            own_events = [(i, e.item) for i, e in enumerate(seq.events)
                          if e.domain == dom]
            other_events = [(i, e.item) for i, e in enumerate(seq.events)
                            if e.domain == other]
            observed = {it for _, it in own_events}
            negs = sample_negatives(rng, catalog.size(dom), observed,
                                    n_negatives)
            test_negs = sample_negatives(rng, catalog.size(dom), observed,
                                         n_negatives)

            train_tgt_pos = own_events[-2][0]
            test_tgt_pos = own_events[-1][0]
            # the other domain's last event is its held-out test target only
            # when that domain is long enough to be split at all
            other_last_pos = other_events[-1][0] \
                if other_events and other in splits else -1

            tr_other = [(p, it) for p, it in other_events
                        if p < train_tgt_pos and p != other_last_pos]
            h, hp, t, tp, tidx = _windowed(
                [(p, it) for p, it in own_events[:-2]], tr_other, max_seq_len)
            train.append(TrainingInstance(
                account_id=seq.account_id, domain=dom,
                history=h, history_pos=hp, transferred=t, transferred_pos=tp,
                transferred_event_idx=tidx,
                query=sp.train_target, target=sp.train_target,
                negatives=negs))

            te_other = [(p, it) for p, it in other_events if p < test_tgt_pos]
            h, hp, t, tp, tidx = _windowed(
                [(p, it) for p, it in own_events[:-1]], te_other, max_seq_len)
            test.append(TrainingInstance(
                account_id=seq.account_id, domain=dom,
                history=h, history_pos=hp, transferred=t, transferred_pos=tp,
                transferred_event_idx=tidx,
                query=sp.test_history[-1], target=sp.test_target,
                negatives=test_negs, is_test=True))
    return Dataset(catalog, train, test, skipped)


def _topic_block(domain_size: int, n_topics: int, topic: int) -> tuple[int, int]:
    """Item-id range [lo, hi) of one topic's block; blocks partition 1..size."""
    per = domain_size // n_topics
    lo = 1 + topic * per
    hi = 1 + (topic + 1) * per if topic < n_topics - 1 else domain_size + 1
    return lo, hi


def generate_synthetic_corpus(
    rng: np.random.Generator, spec: GeneratorConfig,
) -> tuple[Catalog, list[AccountSequence], dict[str, list[EventTruth]]]:
    """Synthesize shared accounts by merging 2-4 users with topic-focused
    tastes in both domains.

    Each user draws ``topics_per_user`` topics in domain A; with probability
    ``cross_correlation`` a topic carries over to domain B unchanged,
    otherwise it is replaced by a random different topic. Events walk a
    sticky user process (switch probability ``user_switch_prob``), pick a
    domain uniformly, and draw an item from the active user's topic block,
    or uniformly from the whole catalog with probability ``noise_rate``
    (these are the planted off-topic events). The returned truth maps
    account id to per-event (user, noise) labels for diagnostics only.
    """
    spec.validate()
    catalog = Catalog(spec.n_items_a, spec.n_items_b)
    sequences: list[AccountSequence] = []
    truth: dict[str, list[EventTruth]] = {}
    width = len(str(spec.n_accounts - 1)) if spec.n_accounts > 1 else 1
    for acc in range(spec.n_accounts):
        n_users = int(rng.integers(spec.users_min, spec.users_max + 1))
        user_topics: dict[str, list[list[int]]] = {"A": [], "B": []}
        for _ in range(n_users):
            topics_a = list(rng.choice(spec.n_topics, size=spec.topics_per_user,
                                       replace=False))
            topics_b = []
            for t in topics_a:
                if rng.random() < spec.cross_correlation or spec.n_topics == 1:
                    topics_b.append(t)
                else:
                    shifted = int(rng.integers(1, spec.n_topics))
                    topics_b.append((t + shifted) % spec.n_topics)
            user_topics["A"].append([int(t) for t in topics_a])
            user_topics["B"].append([int(t) for t in topics_b])

        length = int(rng.integers(spec.seq_len_min, spec.seq_len_max + 1))
        user = int(rng.integers(n_users))
        events: list[Event] = []
        labels: list[EventTruth] = []
        for _ in range(length):
            if n_users > 1 and rng.random() < spec.user_switch_prob:
                hop = int(rng.integers(1, n_users))
                user = (user + hop) % n_users
            dom = "A" if rng.random() < 0.5 else "B"
            size = catalog.size(dom)
            if rng.random() < spec.noise_rate:
                item = int(rng.integers(1, size + 1))
                noise = True
            else:
                topic = int(user_topics[dom][user][
                    int(rng.integers(spec.topics_per_user))])
                lo, hi = _topic_block(size, spec.n_topics, topic)
                item = int(rng.integers(lo, hi))
                noise = False
            events.append(Event(dom, item))
            labels.append(EventTruth(user, noise))
        account_id = f"acc{acc:0{width}d}"
        sequences.append(AccountSequence(account_id, events))
        truth[account_id] = labels
    return catalog, sequences, truth


def save_ground_truth(path, sequences: list[AccountSequence],
                      truth: dict[str, list[EventTruth]]) -> None:
    """TSV dump of generator labels: one row per event."""
    lines = ["account_id\tevent_index\tdomain\titem_id\tuser_id\tis_noise"]
    for seq in sequences:
        for i, (ev, lab) in enumerate(zip(seq.events, truth[seq.account_id])):
            lines.append(f"{seq.account_id}\t{i}\t{ev.domain}\t{ev.item}"
                         f"\t{lab.user}\t{int(lab.noise)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_ground_truth(path) -> dict[str, list[EventTruth]]:
    truth: dict[str, list[EventTruth]] = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        acc, idx, _dom, _item, user, noise = line.split("\t")
        truth.setdefault(acc, [])
        assert int(idx) == len(truth[acc]), "ground truth rows out of order"
        truth[acc].append(EventTruth(int(user), bool(int(noise))))
    return truth
