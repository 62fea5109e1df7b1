"""Command-line entry point.

Commands: generate | train | eval | gradcheck | inspect-episode. Every
command takes --config and --seed (the flag wins over the config file,
which wins over defaults); file outputs land under --out. Exit codes:
0 success, 2 usage/config errors, 1 runtime failures, with a one-line
``error: ...`` message on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import (ConfigError, GeneratorConfig, TrainConfig, dump_config,
                     load_config)
from .data import (ParseError, build_instances, generate_synthetic_corpus,
                   load_corpus, save_corpus, save_ground_truth)
from .domain_filter import (make_episode_context, policy_keep_prob,
                            sample_episode)
from .evaluation import evaluate, results_table, results_to_csv
from .numerics import finite_difference_check
from .recommender import ModelParams, loss_and_grads, loss_only
from .training import (Trainer, data_rng, read_checkpoint_config,
                       report_to_csv)


class UsageError(Exception):
    pass


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, _, value = pair.partition("=")
        out[key.strip()] = value.strip()
    return out


def _overrides(args) -> dict[str, str]:
    ov = _parse_overrides(args.set)
    if args.seed is not None:
        ov["seed"] = str(args.seed)
    return ov


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(args) -> int:
    cfg = load_config(args.config, GeneratorConfig, _overrides(args))
    out = _outdir(args)
    rng = np.random.default_rng(cfg.seed)
    _, sequences, truth = generate_synthetic_corpus(rng, cfg)
    save_corpus(out / "corpus.txt", sequences)
    save_ground_truth(out / "ground_truth.tsv", sequences, truth)
    (out / "generator.cfg").write_text(dump_config(cfg), encoding="utf-8")
    print(f"wrote {len(sequences)} accounts to {out / 'corpus.txt'}")
    return 0


def _build_dataset(corpus_path, cfg: TrainConfig):
    catalog, sequences = load_corpus(corpus_path)
    return build_instances(catalog, sequences, data_rng(cfg.seed),
                           n_negatives=cfg.n_negatives,
                           max_seq_len=cfg.max_seq_len)


PHASE_FILES = {"pretrain": "checkpoint_pretrain.ckpt",
               "filter": "checkpoint_filter.ckpt",
               "joint": "checkpoint_joint.ckpt"}
PHASE_ARG = {"pretrain-bcr": "pretrain", "pretrain-filter": "filter",
             "joint": "joint"}


def cmd_train(args) -> int:
    cfg = load_config(args.config, TrainConfig, _overrides(args))
    out = _outdir(args)
    dataset = _build_dataset(args.corpus, cfg)
    phases = (["pretrain", "filter", "joint"] if args.phase == "all"
              else [PHASE_ARG[args.phase]])

    if args.init:
        trainer = Trainer.load(args.init, dataset)
    elif phases[0] == "pretrain":
        trainer = Trainer(cfg, dataset)
    else:
        prior = {"filter": "pretrain", "joint": "filter"}[phases[0]]
        prior_path = out / PHASE_FILES[prior]
        if not prior_path.exists():
            raise UsageError(
                f"phase '{args.phase}' needs --init or {prior_path}")
        trainer = Trainer.load(prior_path, dataset)

    for phase in phases:
        if phase == "pretrain":
            trainer.pretrain_recommender()
        elif phase == "filter":
            trainer.pretrain_filter()
        else:
            trainer.joint_train()
        trainer.save(out / PHASE_FILES[phase])
    (out / "report.csv").write_text(report_to_csv(trainer.report),
                                    encoding="utf-8")
    print(f"finished phases {phases}; checkpoints in {out}")
    return 0


def cmd_eval(args) -> int:
    out = _outdir(args)
    # dataset must be built with the checkpoint's own config for the
    # instances (negatives, windows) to match training exactly
    cfg = read_checkpoint_config(args.checkpoint)
    dataset = _build_dataset(args.corpus, cfg)
    trainer = Trainer.load(args.checkpoint, dataset)
    policies = None if args.no_filter else trainer.policies
    results = evaluate(trainer.model, policies, dataset.test, cfg.cutoffs(),
                       candidate_mode=cfg.candidate_mode,
                       filter_mode=cfg.filter_mode,
                       greedy_mu=(cfg.greedy_mu1, cfg.greedy_mu2))
    (out / "eval.csv").write_text(results_to_csv(results), encoding="utf-8")
    print(results_table(results))
    return 0


def cmd_gradcheck(args) -> int:
    from .data import Catalog, TrainingInstance

    cfg = load_config(args.config, TrainConfig, _overrides(args))
    rng = np.random.default_rng(cfg.seed)
    # probe model: l2 is raised so every tensor, including rarely touched
    # embedding rows, carries a gradient big enough to measure against
    # central differences at h=1e-5
    small = TrainConfig(embed_dim=4, attn_hidden=3, n_users_a=2, n_users_b=2,
                        attn_smoothing=cfg.attn_smoothing, l2_reg=1e-4,
                        max_seq_len=5, seed=cfg.seed)
    catalog = Catalog(10, 10)
    params = ModelParams.init(rng, catalog, small)
    worst = 0.0
    for dom in ("A", "B"):
        batch = []
        for i in range(3):
            hist = [int(rng.integers(1, 11)) for _ in range(3)]
            tr = [int(rng.integers(1, 11)) for _ in range(2)]
            tgt = int(rng.integers(1, 11))
            batch.append(TrainingInstance(
                f"acc{i}", dom, hist, [0, 2, 4], tr, [1, 3], [0, 1],
                tgt, tgt, [int(rng.integers(1, 11)) for _ in range(2)]))
        _, grads = loss_and_grads(params, batch, dom)
        err = finite_difference_check(
            lambda: loss_only(params, batch, dom), params.tensors, grads,
            h=1e-5)
        worst = max(worst, err)
    print(f"max relative error: {worst:.3e}")
    return 0 if worst < 1e-4 else 1


def cmd_inspect_episode(args) -> int:
    cfg = read_checkpoint_config(args.checkpoint)
    dataset = _build_dataset(args.corpus, cfg)
    trainer = Trainer.load(args.checkpoint, dataset)
    pool = dataset.test if args.split == "test" else dataset.train
    matches = [i for i in pool
               if i.account_id == args.account and i.domain == args.domain]
    if not matches:
        raise UsageError(
            f"no {args.split} instance for account '{args.account}' "
            f"domain {args.domain}")
    inst = matches[0]
    if not inst.transferred:
        raise UsageError("instance has an empty transferred sequence")
    ctx = make_episode_context(trainer.model, inst)
    trace = sample_episode(None, trainer.policies, trainer.model, inst,
                           mode=cfg.filter_mode, greedy=True,
                           greedy_mu=(cfg.greedy_mu1, cfg.greedy_mu2), ctx=ctx)
    items = []
    for m, item in enumerate(inst.transferred):
        row = {"item": int(item), "event_index": inst.transferred_event_idx[m],
               "cosine_to_query": float(ctx.cosines[m])}
        if m < len(trace.low_actions):
            row["keep_prob"] = policy_keep_prob(
                trainer.policies, "low", trace.direction, trace.low_states[m])
            row["action"] = "keep" if trace.low_actions[m] else "drop"
            row["reward"] = trace.rewards[m]
        items.append(row)
    dump = {
        "account": inst.account_id,
        "domain": inst.domain,
        "direction": trace.direction,
        "query_item": inst.query,
        "target_item": inst.target,
        "recommendation_prob": ctx.rec_prob,
        "high_action": "revise" if trace.high_action else "pass-through",
        "high_reward": trace.high_reward,
        "delayed_reward": trace.final_reward,
        "transferred": items,
        "kept_items": [int(x) for x in trace.revised(inst).transferred],
    }
    text = json.dumps(dump, indent=2, sort_keys=True)
    print(text)
    if args.out:
        (_outdir(args) / "episode.json").write_text(text + "\n",
                                                    encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(prog="crossrec")
    sub = top.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a single config key")
        if out_required is not None:
            p.add_argument("--out", required=out_required, default=None,
                           help="output directory")

    p = sub.add_parser("generate", help="write a synthetic corpus")
    common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="run training phases")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--phase", default="all",
                   choices=["pretrain-bcr", "pretrain-filter", "joint", "all"])
    p.add_argument("--init", default=None,
                   help="checkpoint to resume/continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="rank held-out targets from a checkpoint")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--no-filter", action="store_true",
                   help="evaluate the bare recommender without the filter")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the loss gradients")
    common(p, out_required=None)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("inspect-episode",
                       help="dump one greedy filtering trace as JSON")
    common(p, out_required=False)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--account", required=True)
    p.add_argument("--domain", required=True, choices=["A", "B"])
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.set_defaults(fn=cmd_inspect_episode)
    return top


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - one-line machine-parsable failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
