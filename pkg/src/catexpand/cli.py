"""Command-line front end: ``catexpand <subcommand> [options]``.

Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.  Human
readable output goes to standard error; results go to files, and every run
writes one JSON manifest.
"""

from __future__ import annotations

import argparse
import difflib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._binio import file_sha256
from .categorical import load_dataset
from .expansion import (
    closed_form_expand,
    expansion_manifest,
    load_coefficients,
    network_evaluator,
    probe_count,
    probe_expand,
    save_coefficients,
    truncation_report,
)
from .gauge import gauge_residuals, ising_gauge_fix
from .network import load_network
from .parallel import resolve_threads
from .scoring import (
    all_scores,
    chebyshev_separation,
    display_scores,
    read_matrix_csv,
    sequence_separation,
    top_pairs,
    write_first_scores_csv,
    write_matrix_csv,
    write_pair_scores_csv,
)

logger = logging.getLogger("catexpand")

SUBCOMMANDS = ("mnist", "dca", "synth-msa", "expand", "gauge", "score", "truncate-eval", "ppv")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class RunManifest:
    """Collects what one run read, produced and how long it took."""

    def __init__(self, subcommand: str, config: dict):
        self.subcommand = subcommand
        self.config = config
        self.inputs: dict[str, str] = {}
        self.seeds: dict[str, int] = {}
        self.artifacts: list[str] = []
        self.timings: dict[str, float] = {}
        self.result: dict = {}
        self._start = time.perf_counter()

    def add_input(self, path) -> None:
        self.inputs[str(path)] = file_sha256(path)

    def add_artifact(self, path) -> None:
        self.artifacts.append(str(path))

    def to_dict(self) -> dict:
        return {
            "subcommand": self.subcommand,
            "config": self.config,
            "inputs_sha256": self.inputs,
            "seeds": self.seeds,
            "artifacts": self.artifacts,
            "timings": {**self.timings, "total_s": time.perf_counter() - self._start},
            "result": self.result,
            "version": __version__,
        }

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, default=_json_default) + "\n")
        return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _common(p: argparse.ArgumentParser, out_help: str) -> None:
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--config", help="JSON file of option defaults (command-line flags take precedence)")
    p.add_argument("--manifest", help="manifest path (default next to --out)")
    p.add_argument("--threads", type=int, help="worker cap (default $CATEXPAND_THREADS or all CPUs)")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="catexpand", description="Expansion of classifier logits over categorical inputs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)

    p = sub.add_parser("mnist", help="quantised-MNIST experiment")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--bits", type=int, choices=(1, 2), default=1)
    p.add_argument("--scale", choices=("desk", "full"), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--l2", type=float, default=0.01)
    _common(p, "output directory")

    p = sub.add_parser("dca", help="per-position coupling analysis of an alignment")
    p.add_argument("--msa", required=True, help="aligned FASTA")
    p.add_argument("--alphabet", default="ACDEFGHIKLMNPQRSTVWY-")
    p.add_argument("--insert-states", choices=("remove", "reject"), default="remove")
    p.add_argument("--gap-max", type=float, default=0.10)
    p.add_argument("--id-thresh", type=float, default=0.8)
    p.add_argument("--max-sequences", type=int, default=20000)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--l2", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--distogram", help="CSV distance matrix for PPV")
    p.add_argument("--top-pairs", type=int, default=322)
    p.add_argument("--top-triplets", type=int, default=10)
    p.add_argument("--min-sep", type=int, default=5)
    p.add_argument("--contact-threshold", type=float, default=8.0)
    p.add_argument("--apc", action="store_true", help="apply average product correction (extension, off by default)")
    _common(p, "output directory")

    p = sub.add_parser("synth-msa", help="Gibbs-sample an alignment from a planted Potts model")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="Potts model JSON")
    src.add_argument("--random", nargs=3, type=int, metavar=("L", "Q", "PAIRS"),
                     help="draw a random planted model instead")
    p.add_argument("--strength", type=float, default=1.0)
    p.add_argument("--triplet-strength", type=float)
    p.add_argument("--write-spec", help="save the (random) model JSON here")
    p.add_argument("--samples", type=int, required=True)
    p.add_argument("--burn-in", type=int, default=500)
    p.add_argument("--thin", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    _common(p, "output FASTA file")

    p = sub.add_parser("expand", help="extract expansion coefficients of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--order", type=int, choices=(0, 1, 2), default=2)
    p.add_argument("--method", choices=("probe", "closed-form"), default="closed-form")
    p.add_argument("--gauge", action="store_true", help="apply the zero-sum gauge")
    p.add_argument("--verify", action="store_true", help="cross-check probing against the closed form")
    _common(p, "output coefficient container")

    p = sub.add_parser("gauge", help="gauge-fix a coefficient container")
    p.add_argument("--coeffs", required=True)
    _common(p, "output coefficient container")

    p = sub.add_parser("score", help="first- and second-order scores of a coefficient container")
    p.add_argument("--coeffs", required=True)
    p.add_argument("--sqrt", action="store_true", help="write Frobenius norms instead of squares")
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--min-sep", type=int, default=0)
    p.add_argument("--grid-width", type=int, help="use Chebyshev separation on a grid of this width")
    _common(p, "output directory")

    p = sub.add_parser("truncate-eval", help="accuracy of the network and its truncations")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="CATD dataset")
    p.add_argument("--coeffs", help="coefficient container (default: closed form of the model)")
    _common(p, "output JSON report")

    p = sub.add_parser("ppv", help="precision of top pairs against a distance matrix")
    p.add_argument("--scores", required=True, help="CSV pair-score matrix")
    p.add_argument("--distogram", required=True)
    p.add_argument("--top-pairs", type=int, default=322)
    p.add_argument("--min-sep", type=int, default=5)
    p.add_argument("--contact-threshold", type=float, default=8.0)
    _common(p, "output JSON report")
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv: list[str]) -> argparse.Namespace:
    """Parse with precedence flags > config file > built-in defaults."""
    parser = build_parser()
    if argv and not argv[0].startswith("-") and argv[0] not in SUBCOMMANDS:
        close = difflib.get_close_matches(argv[0], SUBCOMMANDS, n=3)
        hint = f"; did you mean {', '.join(close)}?" if close else f"; choose from {', '.join(SUBCOMMANDS)}"
        raise UsageError(f"catexpand: unknown subcommand {argv[0]!r}{hint}")
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    config_path = pre.parse_known_args(argv[1:])[0].config if argv and argv[0] in SUBCOMMANDS else None
    if config_path:
        try:
            config = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {config_path}: {exc}") from None
        if not isinstance(config, dict):
            raise UsageError(f"{config_path}: expected a JSON object")
        sp = _subparser(parser, argv[0])
        known = {a.dest for a in sp._actions} - {"help", "config"}
        config = {k.replace("-", "_"): v for k, v in config.items()}
        unknown = sorted(set(config) - known)
        if unknown:
            raise UsageError(f"unknown keys in {config_path}: {', '.join(unknown)}")
        # config values satisfy required flags; explicit flags still override them
        for action in sp._actions:
            if action.dest in config:
                action.required = False
        sp.set_defaults(**config)
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("catexpand: a subcommand is required; see --help")
    return args


def _manifest_path(args) -> Path:
    if args.manifest:
        return Path(args.manifest)
    out = Path(args.out)
    if args.command in ("mnist", "dca", "score"):
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


def _config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("verbose",)}


def cmd_mnist(args, man: RunManifest) -> None:
    from .mnist import MnistConfig, run_mnist_experiment

    man.add_input(args.images)
    man.add_input(args.labels)
    cfg = MnistConfig(
        images=args.images, labels=args.labels, out_dir=args.out, bits=args.bits, scale=args.scale,
        seed=args.seed, n_train=args.n_train, n_val=args.n_val, hidden=args.hidden, epochs=args.epochs,
        batch_size=args.batch_size, learning_rate=args.lr, l2_coefficient=args.l2, threads=args.threads,
    )
    man.seeds["split_init_shuffle"] = args.seed
    report = run_mnist_experiment(cfg)
    man.artifacts.extend(report["artifacts"])
    man.add_artifact(Path(args.out) / "report.json")
    man.timings.update(report["timings"])
    man.result = {k: report[k] for k in ("train_accuracy", "validation_accuracy", "truncation", "n_train", "n_val")}
    t = report["truncation"]["validation"]
    print(f"validation accuracy: full {t['full']:.4f}  order2 {t['order2']:.4f}  order1 {t['order1']:.4f}",
          file=sys.stderr)


def cmd_dca(args, man: RunManifest) -> None:
    from .msa import DcaConfig, PositionConfig, load_alignment, load_distances, run_dca

    man.add_input(args.msa)
    msa = load_alignment(args.msa, args.insert_states, args.alphabet)
    distances = None
    if args.distogram:
        man.add_input(args.distogram)
        distances = load_distances(args.distogram, msa.length)
    cfg = DcaConfig(
        gap_max=args.gap_max, id_thresh=args.id_thresh, max_sequences=args.max_sequences,
        position=PositionConfig(args.hidden, args.lr, args.epochs, args.l2, args.batch_size, args.seed),
        top_pairs=args.top_pairs, top_triplets=args.top_triplets, min_separation=args.min_sep,
        contact_threshold=args.contact_threshold, apc=args.apc, threads=args.threads,
    )
    man.seeds["positions"] = args.seed
    report = run_dca(msa, cfg, args.out, distances)
    out = Path(args.out) / "report.json"
    out.write_text(json.dumps(report, indent=2, default=_json_default) + "\n")
    man.artifacts.extend(report["artifacts"])
    man.add_artifact(out)
    man.timings.update(report["timings"])
    man.result = {k: report[k] for k in ("effective_sequences", "mean_accuracy", "top_triplets") if k in report}
    if "ppv" in report:
        man.result["ppv"] = report["ppv"]
        print(f"PPV of top {args.top_pairs} pairs: {report['ppv']:.3f}", file=sys.stderr)


def cmd_synth_msa(args, man: RunManifest) -> None:
    from .msa import write_fasta
    from .potts import PlantedPottsModel, random_planted_model, synth_potts_msa

    if args.spec:
        man.add_input(args.spec)
        model = PlantedPottsModel.load(args.spec)
    else:
        L, q, n_pairs = args.random
        model = random_planted_model(L, q, n_pairs, args.strength, args.seed, args.triplet_strength)
    if args.write_spec:
        man.add_artifact(model.save(args.write_spec))
    man.seeds["sampler"] = args.seed
    t0 = time.perf_counter()
    msa = synth_potts_msa(model, args.samples, args.burn_in, args.thin, args.seed)
    man.timings["sample_s"] = time.perf_counter() - t0
    if msa.alphabet is None:
        raise ValueError(f"q={model.q} exceeds the FASTA alphabet")
    man.add_artifact(write_fasta(msa, args.out))
    man.result = {"L": model.L, "q": model.q, "samples": msa.depth, "alphabet": msa.alphabet}
    print(f"wrote {msa.depth} sequences of length {msa.length} (alphabet {msa.alphabet!r})", file=sys.stderr)


def cmd_expand(args, man: RunManifest) -> None:
    man.add_input(args.model)
    net = load_network(args.model)
    threads = resolve_threads(args.threads)
    t0 = time.perf_counter()
    if args.method == "closed-form":
        coeffs = closed_form_expand(net, args.order, threads=threads)
    else:
        coeffs = probe_expand(network_evaluator(net), net.spec, args.order)
    man.timings["expand_s"] = time.perf_counter() - t0
    if args.verify:
        other = (probe_expand(network_evaluator(net), net.spec, args.order) if args.method == "closed-form"
                 else closed_form_expand(net, args.order, threads=threads))
        dev = 0.0
        for a, b in ((coeffs.order0, other.order0), (coeffs.order1, other.order1), (coeffs.order2, other.order2)):
            if a is not None:
                dev = max(dev, float(np.max(np.abs(a - b), initial=0.0)))
        man.result["verify_max_deviation"] = dev
        print(f"probe vs closed form: max deviation {dev:.3e}", file=sys.stderr)
    if args.gauge:
        coeffs = ising_gauge_fix(coeffs)
        man.result["gauge_residual"] = gauge_residuals(coeffs).max_residual
    path = save_coefficients(coeffs, args.out, expansion_manifest(
        args.model, args.method, probe_count(net.spec, args.order), man.timings["expand_s"]))
    man.add_artifact(path)


def cmd_gauge(args, man: RunManifest) -> None:
    man.add_input(args.coeffs)
    coeffs = ising_gauge_fix(load_coefficients(args.coeffs))
    man.result["gauge_residual"] = gauge_residuals(coeffs).max_residual
    man.add_artifact(save_coefficients(coeffs, args.out, {"source_coefficients_sha256": file_sha256(args.coeffs)}))


def cmd_score(args, man: RunManifest) -> None:
    man.add_input(args.coeffs)
    scores = all_scores(load_coefficients(args.coeffs))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man.add_artifact(write_first_scores_csv(scores, out / "first_order_scores.csv", args.sqrt))
    if scores.second_order is not None:
        man.add_artifact(write_pair_scores_csv(scores, out / "pair_scores.csv", args.sqrt))
        man.add_artifact(write_matrix_csv(display_scores(scores.pair_matrix(), args.sqrt), out / "pair_matrix.csv"))
        sep = chebyshev_separation(args.grid_width) if args.grid_width else sequence_separation
        top = top_pairs(scores, args.top, args.min_sep, separation=sep)
        path = out / "top_pairs.csv"
        with open(path, "w") as fh:
            fh.write("rank,i,j,score\n")
            for r, (i, j, s) in enumerate(top):
                fh.write(f"{r},{i},{j},{float(s)!r}\n")
        man.add_artifact(path)


def cmd_truncate_eval(args, man: RunManifest) -> None:
    man.add_input(args.model)
    man.add_input(args.data)
    net = load_network(args.model)
    data = load_dataset(args.data)
    if args.coeffs:
        man.add_input(args.coeffs)
        coeffs = load_coefficients(args.coeffs)
    else:
        coeffs = closed_form_expand(net, 2, threads=resolve_threads(args.threads))
    rep = truncation_report(net, coeffs, data)
    man.result = {"full": rep.full, "order2": rep.order2, "order1": rep.order1}
    path = Path(args.out)
    path.write_text(json.dumps(man.result, indent=2) + "\n")
    man.add_artifact(path)
    print(f"accuracy: full {rep.full:.4f}  order2 {rep.order2}  order1 {rep.order1:.4f}", file=sys.stderr)


def cmd_ppv(args, man: RunManifest) -> None:
    from .msa import load_distances, ppv_against_distogram

    man.add_input(args.scores)
    man.add_input(args.distogram)
    scores = read_matrix_csv(args.scores)
    dist = load_distances(args.distogram, scores.shape[0])
    ppv = ppv_against_distogram(scores, dist, args.top_pairs, args.contact_threshold, args.min_sep)
    man.result = {"ppv": ppv, "top_pairs": args.top_pairs}
    path = Path(args.out)
    path.write_text(json.dumps(man.result, indent=2) + "\n")
    man.add_artifact(path)
    print(f"PPV: {ppv:.4f}", file=sys.stderr)


COMMANDS = {
    "mnist": cmd_mnist,
    "dca": cmd_dca,
    "synth-msa": cmd_synth_msa,
    "expand": cmd_expand,
    "gauge": cmd_gauge,
    "score": cmd_score,
    "truncate-eval": cmd_truncate_eval,
    "ppv": cmd_ppv,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    man = RunManifest(args.command, _config(args))
    try:
        COMMANDS[args.command](args, man)
    except (OSError, ValueError, RuntimeError, MemoryError) as exc:
        print(f"catexpand {args.command}: error: {exc}", file=sys.stderr)
        return 2
    man.write(_manifest_path(args))
    return 0


if __name__ == "__main__":
    sys.exit(main())
