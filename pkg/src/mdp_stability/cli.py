"""Command-line harness over the library.

Exit codes are a stable contract: 0 success, 1 negative domain verdict,
2 input error, 3 numerical non-convergence.  JSON is the canonical output
(floats printed with 17 significant digits so round-trips are lossless);
CSV is a per-command projection.  Artifacts are deterministic given flags
and seed; timestamps live in a side file next to --out.
"""

from __future__ import annotations

import argparse
import datetime
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .bisim import (BisimConfig, NonConvergence, align_reward_scale,
                    bisim_quotient, cross_bisim_metric, hausdorff_distance)
from .mdp import (MdpSpec, greedy_policy, induce_chain, load_mdp,
                  mdp_to_document, validate, value_iteration)
from .onpolicy import (analyze_chain, embedded_to_document, load_embedded,
                       load_toy_policy, rate_of_decrease_check)
from .safety import (SafetyQuery, StartDistribution, certify_safety,
                     expected_steps, safety_frontier,
                     verify_stability_instance)
from .scenarios import (PlayingDeadParams, build_duplicated,
                        build_playing_dead, build_uniform_shutdown,
                        random_family, random_family_metadata,
                        random_perturbation)

EXIT_OK = 0
EXIT_NEGATIVE = 1
EXIT_INPUT = 2
EXIT_NONCONVERGED = 3


# -- deterministic JSON with 17 significant digits -----------------------------

def render_json(obj, indent=0):
    pad = "  " * indent
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            raise ValueError("non-finite float in artifact; sanitize to null")
        return format(obj, ".17g")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        inner = ",\n".join(pad + "  " + render_json(v, indent + 1) for v in obj)
        return "[\n" + inner + "\n" + pad + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        inner = ",\n".join(
            pad + "  " + json.dumps(str(k)) + ": " + render_json(v, indent + 1)
            for k, v in obj.items())
        return "{\n" + inner + "\n" + pad + "}"
    if isinstance(obj, np.floating):
        return render_json(float(obj))
    if isinstance(obj, np.ndarray):
        return render_json(obj.tolist(), indent)
    raise TypeError(f"cannot render {type(obj)!r}")


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def _emit(args, document, csv_table=None):
    """Write the artifact (JSON or CSV projection) and the metadata side
    file when writing to disk."""
    if args.format == "csv":
        if csv_table is None:
            raise ValueError("this command has no CSV projection")
        header, rows = csv_table
        text = "\n".join([",".join(header)]
                         + [",".join(_csv_cell(c) for c in row)
                            for row in rows]) + "\n"
    else:
        text = render_json(document) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        meta = {
            "command": args.command,
            "written_at": datetime.datetime.now(datetime.timezone.utc)
            .isoformat(),
            "duration_s": time.monotonic() - args._t0,
            "tool_version": __version__,
            "threads_cap": _threads_cap(),
        }
        with open(args.out + ".meta.json", "w") as fh:
            json.dump(meta, fh, indent=2)
    else:
        sys.stdout.write(text)


def _threads_cap():
    try:
        return max(1, int(os.environ.get("MDP_STABILITY_THREADS", "1")))
    except ValueError:
        return 1


def _load_mdp_or_embedded(path) -> MdpSpec:
    with open(path) as fh:
        doc = json.load(fh)
    doc.pop("embedding", None)
    doc.pop("side_info", None)
    doc.pop("generator", None)
    return load_mdp(doc)


def _config_from(args, mdp: MdpSpec) -> BisimConfig:
    c_t = args.c_t if args.c_t is not None else mdp.discount
    c_r = args.c_r if args.c_r is not None else 1.0 - c_t
    return BisimConfig(c_R=c_r, c_T=c_t, tolerance=args.tol)


def _parse_sizes(text):
    return [float(tok) for tok in text.split(",") if tok.strip()]


# -- command handlers -----------------------------------------------------------

def cmd_validate(args):
    with open(args.path) as fh:
        doc = json.load(fh)
    try:
        for key in ("states", "actions", "transitions", "discount", "safe"):
            if key not in doc:
                raise ValueError(f"document missing {key!r}")
        if ("rewards" in doc) == ("rewards_sas" in doc):
            raise ValueError("exactly one of rewards/rewards_sas required")
        states = doc["states"]
        safe = frozenset(states.index(s) for s in doc["safe"])
        if "rewards" in doc:
            mdp = MdpSpec(states, doc["actions"], doc["transitions"],
                          doc["rewards"], float(doc["discount"]), safe)
        else:
            mdp = MdpSpec.from_sas_rewards(states, doc["actions"],
                                           doc["transitions"],
                                           doc["rewards_sas"],
                                           float(doc["discount"]), safe)
    except (ValueError, TypeError) as exc:
        raise SystemExit(f"unparseable MDP document: {exc}") from exc
    report = validate(mdp)
    document = {"valid": report.ok,
                "violations": [str(v) for v in report.violations]}
    table = (["violation"], [[str(v)] for v in report.violations])
    _emit(args, document, table)
    return EXIT_OK if report.ok else EXIT_NEGATIVE


def cmd_bisim(args):
    m1 = _load_mdp_or_embedded(args.path1)
    m2 = _load_mdp_or_embedded(args.path2)
    metric = cross_bisim_metric(m1, m2, _config_from(args, m1))
    document = metric.to_document()
    document["converged"] = metric.converged
    document["d_H"] = hausdorff_distance(metric) if metric.converged else None
    rows = [[i, j, metric.dist[i, j]]
            for i in range(m1.n_states) for j in range(m2.n_states)]
    _emit(args, document, (["s1", "s2", "distance"], rows))
    return EXIT_OK if metric.converged else EXIT_NONCONVERGED


def cmd_align(args):
    m1 = _load_mdp_or_embedded(args.path1)
    m2 = _load_mdp_or_embedded(args.path2)
    result = align_reward_scale(m1, m2, _config_from(args, m1),
                                grid=args.grid)
    document = {
        "h_star": result.h_star,
        "aligned_distance": result.aligned_distance,
        "boundary": result.boundary,
        "profile": [[h, obj] for h, obj in result.profile],
    }
    _emit(args, document,
          (["h", "objective"], [[h, obj] for h, obj in result.profile]))
    return EXIT_OK


def cmd_quotient(args):
    mdp = _load_mdp_or_embedded(args.path)
    result = bisim_quotient(mdp, merge_tol=args.tol)
    document = {
        "classes": [[mdp.state_ids[s] for s in members]
                    for members in result.partition],
        "quotient": mdp_to_document(result.quotient),
    }
    rows = [[mdp.state_ids[s], int(result.lift[s])]
            for s in range(mdp.n_states)]
    _emit(args, document, (["state", "class"], rows))
    return EXIT_OK


def cmd_certify(args):
    mdp = _load_mdp_or_embedded(args.path)
    start = None
    if args.start is not None:
        start = StartDistribution.point_mass(mdp.n_states,
                                             mdp.state_index(args.start))
    query = SafetyQuery(args.epsilon, start)
    n_values = (args.big_n,) if args.big_n is not None else ()
    cert = certify_safety(mdp, query, N_values=n_values)
    document = cert.to_document()
    rows = [[cert.epsilon,
             None if not math.isfinite(cert.worst_time) else cert.worst_time,
             cert.epsilon_optimal_count]]
    _emit(args, document,
          (["epsilon", "worst_time", "epsilon_optimal_count"], rows))
    if args.big_n is not None and not cert.is_safe(args.big_n):
        return EXIT_NEGATIVE
    return EXIT_OK


def cmd_frontier(args):
    mdp = _load_mdp_or_embedded(args.path)
    if args.sizes:
        epsilons = _parse_sizes(args.sizes)
    else:
        top = args.epsilon if args.epsilon is not None else 1.0
        epsilons = [top * (k + 1) / args.grid for k in range(args.grid)]
    rows = safety_frontier(mdp, epsilons)
    document = {"frontier": [
        {"epsilon": eps,
         "worst_time": t if math.isfinite(t) else None,
         "finite": math.isfinite(t)} for eps, t in rows]}
    table = (["epsilon", "worst_time"],
             [[eps, t if math.isfinite(t) else None] for eps, t in rows])
    _emit(args, document, table)
    return EXIT_OK


def cmd_hitting_time(args):
    mdp = _load_mdp_or_embedded(args.path)
    policy = greedy_policy(mdp, value_iteration(mdp))
    chain = induce_chain(mdp, policy)
    t = expected_steps(chain)
    per_state = {mdp.state_ids[chain.index_map[i]]:
                 (t[i] if math.isfinite(t[i]) else None)
                 for i in range(chain.n_states)}
    worst = float(np.max(t)) if len(t) else 0.0
    document = {
        "policy": policy.table.tolist(),
        "expected_steps": per_state,
        "worst": worst if math.isfinite(worst) else None,
        "worst_finite": math.isfinite(worst),
    }
    if args.start is not None:
        i = mdp.state_index(args.start)
        value = t[list(chain.index_map).index(i)]
        document["start"] = args.start
        document["start_value"] = value if math.isfinite(value) else None
    rows = [[k, v] for k, v in per_state.items()]
    _emit(args, document, (["state", "expected_steps"], rows))
    return EXIT_OK


def cmd_playing_dead(args):
    base = _load_mdp_or_embedded(args.path)
    params = PlayingDeadParams(
        base=base, delta=args.delta,
        escape_state=base.state_index(args.escape_state),
        escape_action=base.action_ids.index(args.escape_action),
        epsilon=args.epsilon)
    out = build_playing_dead(params)
    _emit(args, mdp_to_document(out))
    return EXIT_OK


def cmd_uniform_shutdown(args):
    mdp = _load_mdp_or_embedded(args.path)
    target = mdp.state_index(args.target) if args.target else None
    out = build_uniform_shutdown(mdp, args.big_n, target=target)
    _emit(args, mdp_to_document(out))
    return EXIT_OK


def cmd_duplicate(args):
    mdp = _load_mdp_or_embedded(args.path)
    out = build_duplicated(mdp, mdp.state_index(args.state),
                           copies=args.copies)
    _emit(args, mdp_to_document(out))
    return EXIT_OK


def cmd_random(args):
    shape = tuple(int(x) for x in args.shape.split(","))
    if len(shape) != 3:
        raise SystemExit("--shape must be states,actions,dim")
    reward_range = tuple(_parse_sizes(args.reward_range))
    emdp = random_family(args.seed, shape, args.sparsity, reward_range,
                         gamma=args.gamma)
    document = embedded_to_document(emdp)
    document["generator"] = random_family_metadata(
        args.seed, shape, args.sparsity, reward_range, gamma=args.gamma)
    _emit(args, document)
    return EXIT_OK


def cmd_onpolicy(args):
    emdp = load_embedded(args.path)
    policy = load_toy_policy(args.policy)
    if args.start is not None:
        start = StartDistribution.point_mass(
            emdp.base.n_states, emdp.base.state_index(args.start),
            allow_safe_support=True)
    else:
        start = StartDistribution.uniform_over(
            emdp.base.n_states, emdp.base.nonsafe_indices)
    analysis = analyze_chain(emdp, policy, start)
    _emit(args, analysis.to_document())
    return EXIT_OK


def cmd_onpolicy_sweep(args):
    emdp = load_embedded(args.path)
    policy = load_toy_policy(args.policy)
    sizes = sorted(_parse_sizes(args.sizes))
    rows = []
    for k, size in enumerate(sizes):
        pert = random_perturbation(emdp, policy, size, seed=args.seed + k)
        report = rate_of_decrease_check(emdp, policy, pert)
        rows.append({"size": size, "kind": "random",
                     **report.to_document()})
    if args.big_n is not None:
        # One structured rung: blend a 1/N hop to safety into every row
        # (the canonical upward jump of the shutdown probability).
        from .onpolicy import Perturbation
        modified = build_uniform_shutdown(emdp.base, args.big_n)
        pert = Perturbation(np.zeros_like(emdp.embedding),
                            modified.transition - emdp.base.transition)
        report = rate_of_decrease_check(emdp, policy, pert)
        rows.append({"size": report.size, "kind": "uniform-shutdown",
                     **report.to_document()})
    document = {"rows": rows, "seed": args.seed}
    table = (["size", "kind", "s_pi_before", "s_pi_after", "ratio",
              "bound_B", "within_bound", "trans_preserved"],
             [[r["size"], r["kind"], r["s_pi_before"], r["s_pi_after"],
               r["ratio"], r["bound_B"], r["within_bound"],
               r["trans_preserved"]] for r in rows])
    _emit(args, document, table)
    if any(not r["within_bound"] for r in rows):
        return EXIT_NEGATIVE
    return EXIT_OK


def cmd_stability_experiment(args):
    mdp = _load_mdp_or_embedded(args.path)
    config = _config_from(args, mdp)
    sizes = sorted(_parse_sizes(args.sizes)) if args.sizes \
        else [0.0, 1e-4, 1e-3, 1e-2, 1e-1]
    if sizes[0] != 0.0:
        sizes = [0.0] + sizes
    rng = np.random.default_rng(args.seed)
    rows = []
    largest_holding = None
    for size in sizes:
        jitter = rng.uniform(-size, size, size=mdp.reward.shape)
        perturbed = mdp.with_rewards(mdp.reward + jitter)
        report = verify_stability_instance(mdp, perturbed, args.big_n,
                                           args.epsilon, config)
        rows.append({"size": size, "kind": "reward-jitter",
                     **report.to_document()})
        if report.conclusion_holds:
            largest_holding = size
    if args.delta is not None:
        # One adversarial rung: the deceptive-hibernation variant.  The
        # escape state is the most valuable one under the optimal values.
        v_star = value_iteration(mdp).values
        escape = int(np.argmax(v_star))
        action = int(greedy_policy(mdp, value_iteration(mdp)).table[escape])
        variant = build_playing_dead(PlayingDeadParams(
            base=mdp, delta=args.delta, escape_state=escape,
            escape_action=action, epsilon=args.epsilon))
        report = verify_stability_instance(mdp, variant, args.big_n,
                                           args.epsilon, config)
        rows.append({"size": args.delta, "kind": "playing-dead",
                     **report.to_document()})
    document = {"rungs": rows, "largest_size_holding": largest_holding,
                "seed": args.seed}
    table = (["size", "kind", "d_H", "isolated", "conclusion_holds"],
             [[r["size"], r["kind"], r["d_H"], r["isolated"],
               r["conclusion_holds"]] for r in rows])
    _emit(args, document, table)
    return EXIT_OK if largest_holding is not None else EXIT_NEGATIVE


# -- argument parsing -----------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="mdp-stability",
        description="Distances between MDPs and shutdown-safety stability "
                    "certificates")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, paths=("path",)):
        for name in paths:
            p.add_argument(name)
        p.add_argument("--out", default=None, help="artifact path "
                       "(stdout if omitted; adds a .meta.json side file)")
        p.add_argument("--format", choices=("json", "csv"), default="json")

    def metric_flags(p):
        p.add_argument("--c-r", dest="c_r", type=float, default=None,
                       help="reward-gap coefficient (default 1 - c_T)")
        p.add_argument("--c-t", dest="c_t", type=float, default=None,
                       help="transport coefficient (default: the discount)")
        p.add_argument("--tol", type=float, default=1e-6)

    p = sub.add_parser("validate", help="check an MDP document")
    common(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("bisim", help="cross-MDP metric and Hausdorff distance")
    common(p, ("path1", "path2"))
    metric_flags(p)
    p.set_defaults(func=cmd_bisim)

    p = sub.add_parser("align", help="reward-scale alignment search")
    common(p, ("path1", "path2"))
    metric_flags(p)
    p.add_argument("--grid", type=int, default=101)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("quotient", help="bisimulation quotient")
    common(p)
    p.add_argument("--tol", type=float, default=1e-9,
                   help="merge tolerance")
    p.set_defaults(func=cmd_quotient)

    p = sub.add_parser("certify", help="(N, epsilon)-safety certificate")
    common(p)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--big-n", dest="big_n", type=float, default=None)
    p.add_argument("--start", default=None, help="start state id "
                   "(default: worst case)")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("frontier", help="worst hitting time vs epsilon")
    common(p)
    p.add_argument("--sizes", default=None,
                   help="comma-separated epsilon grid")
    p.add_argument("--epsilon", type=float, default=None,
                   help="top of the implicit grid")
    p.add_argument("--grid", type=int, default=20)
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("hitting-time",
                       help="expected steps to safety under the greedy "
                            "optimal policy")
    common(p)
    p.add_argument("--start", default=None)
    p.set_defaults(func=cmd_hitting_time)

    p = sub.add_parser("playing-dead",
                       help="generate the deceptive-hibernation variant")
    common(p)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--escape-state", required=True)
    p.add_argument("--escape-action", required=True)
    p.set_defaults(func=cmd_playing_dead)

    p = sub.add_parser("uniform-shutdown",
                       help="blend a 1/N hop to safety into every row")
    common(p)
    p.add_argument("--big-n", dest="big_n", type=float, required=True)
    p.add_argument("--target", default=None, help="safe state id")
    p.set_defaults(func=cmd_uniform_shutdown)

    p = sub.add_parser("duplicate", help="split a state into bisimilar copies")
    common(p)
    p.add_argument("--state", required=True)
    p.add_argument("--copies", type=int, default=2)
    p.set_defaults(func=cmd_duplicate)

    p = sub.add_parser("random", help="seeded random embedded MDP")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--shape", default="5,2,3", help="states,actions,dim")
    p.add_argument("--sparsity", type=float, default=0.6)
    p.add_argument("--reward-range", default="0,1")
    p.add_argument("--gamma", type=float, default=0.9,
                   help="discount of the generated MDP")
    p.add_argument("--out", default=None)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_random)

    p = sub.add_parser("onpolicy", help="shutdown probability and bound")
    common(p, ("path", "policy"))
    p.add_argument("--start", default=None)
    p.set_defaults(func=cmd_onpolicy)

    p = sub.add_parser("onpolicy-sweep",
                       help="perturbation ladder of the decrease rate")
    common(p, ("path", "policy"))
    p.add_argument("--sizes", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--big-n", dest="big_n", type=float, default=None,
                   help="also try the uniform 1/N shutdown blend")
    p.set_defaults(func=cmd_onpolicy_sweep)

    p = sub.add_parser("stability-experiment",
                       help="reward-jitter ladder through the stability "
                            "check")
    common(p)
    metric_flags(p)
    p.add_argument("--sizes", default=None)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--big-n", dest="big_n", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=float, default=None,
                   help="also try a deceptive-hibernation rung at this "
                        "leak rate")
    p.set_defaults(func=cmd_stability_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._t0 = time.monotonic()
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except json.JSONDecodeError as exc:
        print(f"input error: malformed JSON: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(f"input error: {exc.code}", file=sys.stderr)
            return EXIT_INPUT
        raise
    except NonConvergence as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except ValueError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
