"""``corematch`` command line.

Subcommands: ``gen-model``, ``run``, ``dense``, ``validate``, ``plot-data``,
``flops`` and ``rerun``. Commands given ``--out DIR`` write their outputs and
a ``manifest.json`` there; ``rerun MANIFEST --out DIR2`` replays a manifest
and reproduces the outputs byte for byte.

Exit codes: 0 ok, 2 validation failed, 3 invalid parameter, 4 I/O or weight
file error, 5 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import criteria as cr
from .costs import COST_SCHEMA_VERSION, PRESETS, CostDims, flops_model, memory_model
from .engine import SparsityParams, generate, generate_dense, prefill
from .errors import CoreMatchError, InvalidParam
from .model import ModelConfig, Prompt, forward_dense, init_synthetic, orthogonality_deviation, qk_deviation
from .sparsity import (
    CSV_SCHEMA_VERSION, frequency_rows, intersection_counts, selection_rows, sentence_core_neurons, to_csv,
)
from .synth import synthetic_vlm_prompt
from .weights_io import FORMAT_VERSION, file_checksum, load_weights, save_weights

EXIT_OK, EXIT_FAIL, EXIT_PARAM, EXIT_IO, EXIT_INTERNAL = 0, 2, 3, 4, 5
MANIFEST_VERSION = 1
REPORT_SCHEMA_VERSION = 1
FORMATS = {
    "manifest": MANIFEST_VERSION, "report": REPORT_SCHEMA_VERSION, "csv": CSV_SCHEMA_VERSION,
    "cost": COST_SCHEMA_VERSION, "weights": FORMAT_VERSION,
}
_NOT_RECORDED = {"out", "func", "manifest"}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse exits 2 by default; 2 means "validation failed" here
        self.print_usage(sys.stderr)
        self.exit(EXIT_PARAM, f"{self.prog}: error: {message}\n")


def _threads() -> int:
    raw = os.environ.get("CM_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidParam(f"CM_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise InvalidParam("CM_THREADS must be at least 1")
    return n


def _dump(obj) -> str:
    return json.dumps(cr._jsonable(obj), indent=2, sort_keys=True) + "\n"


def _span(text: str | None) -> tuple[int, int] | None:
    if text is None:
        return None
    try:
        s, e = (int(v) for v in text.split(":"))
    except ValueError:
        raise InvalidParam(f"--prunable-span expects START:END, got {text!r}") from None
    return s, e


# ------------------------------------------------------------------ outputs


class Outputs:
    """Collects named text outputs; writes them and the manifest under ``--out``."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.files: dict[str, str] = {}
        self.extra: dict = {}
        self.outputs: list[str] = []

    def add(self, name: str, text: str) -> None:
        self.files[name] = text

    def manifest(self) -> dict:
        recorded = {k: v for k, v in sorted(vars(self.args).items()) if k not in _NOT_RECORDED}
        return {
            "manifest_version": MANIFEST_VERSION, "package_version": __version__,
            "subcommand": self.args.command, "args": recorded, "formats": FORMATS,
            "outputs": sorted(self.outputs or self.files), **self.extra,
        }

    def flush(self) -> None:
        if not self.args.out:
            return
        out = Path(self.args.out)
        out.mkdir(parents=True, exist_ok=True)
        for name, text in self.files.items():
            (out / name).write_text(text)
        (out / "manifest.json").write_text(_dump(self.manifest()))


# ------------------------------------------------------------------ prompts


def _prompt(args, weights, seed: int | None = None) -> Prompt:
    if args.tokens:
        try:
            ids = [int(t) for t in args.tokens.split(",") if t.strip()]
        except ValueError:
            raise InvalidParam("--tokens expects comma-separated integers") from None
        return Prompt(tuple(ids))
    p, _ = synthetic_vlm_prompt(
        weights, args.prompt_seed if seed is None else seed,
        n_image=args.n_image, n_prefix=args.n_prefix, n_suffix=args.n_suffix,
    )
    return p


def _params(args) -> SparsityParams:
    return SparsityParams(
        rho=args.rho, beta=args.beta, prune_layer=args.prune_layer,
        prunable_span=_span(args.prunable_span),
        enable_token_pruning=not args.no_token_prune,
        enable_neuron_sparsity=not args.no_neuron_sparse,
        retain_early_kv=not args.drop_early_kv,
    )


def _load(args, out: Outputs):
    weights = load_weights(args.model)
    out.extra["model_checksum"] = file_checksum(args.model)
    return weights


# ------------------------------------------------------------------ commands


def cmd_gen_model(args) -> int:
    cfg = ModelConfig(
        n_layers=args.layers, d_model=args.dmodel, d_ffn=args.dffn, n_heads=args.heads,
        vocab_size=args.vocab, max_seq_len=args.max_seq, activation=args.activation, dtype=args.dtype,
    )
    weights = init_synthetic(cfg, args.seed, orthogonality_mix=args.ortho, scale=args.scale, theta=args.theta)
    path = Path(args.out) / Path(args.path).name if args.out else Path(args.path)
    path.parent.mkdir(parents=True, exist_ok=True)
    checksum = save_weights(weights, path)
    out = Outputs(args)
    out.extra["model_checksum"] = checksum
    out.outputs = [path.name]
    path.with_name(path.name + ".manifest.json").write_text(_dump(out.manifest()))
    lines = ["layer  qk        wv        wo        wd"]
    for i, lw in enumerate(weights.layers):
        devs = (qk_deviation(lw.wq, lw.wk)[0], *(orthogonality_deviation(w) for w in (lw.wv, lw.wo, lw.wd)))
        lines.append(f"{i:<5}  " + "  ".join(f"{d:.2e}" for d in devs))
    print("\n".join(lines))
    print(f"wrote {path} checksum {checksum:016x}")
    return EXIT_OK


def cmd_run(args) -> int:
    out = Outputs(args)
    weights = _load(args, out)
    prompt = _prompt(args, weights)
    params = _params(args)
    res = generate(weights, prompt, params, args.max_new)
    report = {
        "schema_version": REPORT_SCHEMA_VERSION, "tokens": res.tokens,
        "params": params.to_dict(), "reports": res.reports, "cost": res.cost.to_dict(),
    }
    out.add("generation.json", _dump(report))
    if "csv" in args.format:
        state, _, trace = prefill(weights, prompt, params)
        rows = []
        for i, core in enumerate(state.core_sets):
            table, _ = sentence_core_neurons(trace[i].act, params.rho, params.beta, layer=i)
            rows += frequency_rows(table, core)
        out.add("frequency.csv", to_csv(rows))
        if state.selection is not None:
            out.add("selection.csv", to_csv(selection_rows(state.selection)))
    out.flush()
    print(" ".join(map(str, res.tokens)))
    return EXIT_OK


def cmd_dense(args) -> int:
    out = Outputs(args)
    weights = _load(args, out)
    tokens, _ = generate_dense(weights, _prompt(args, weights), args.max_new)
    out.add("generation.json", _dump({"schema_version": REPORT_SCHEMA_VERSION, "tokens": tokens}))
    out.flush()
    print(" ".join(map(str, tokens)))
    return EXIT_OK


def _analysis(args, weights, seed: int):
    prompt = _prompt(args, weights, seed)
    _, trace = forward_dense(weights, prompt)
    span = prompt.image_span if prompt.n_image else None
    return prompt, trace, span


def _check_layer(args, weights) -> None:
    if not 0 <= args.layer < weights.config.n_layers:
        raise InvalidParam(f"--layer {args.layer} outside [0, {weights.config.n_layers})")


def _matching_one(args, weights, seed: int) -> cr.ValidationSummary:
    prompt, trace, span = _analysis(args, weights, seed)
    _, core = sentence_core_neurons(trace[args.layer].act, args.rho, args.beta, layer=args.layer)
    tokens = range(*span) if span else None
    return cr.validate_matching(trace, args.layer, core, tokens=tokens, seed=seed)


def _figure_csvs(args, weights, trace, span, obs2, matching) -> dict[str, str]:
    L = args.layer
    _, core = sentence_core_neurons(trace[L].act, args.rho, args.beta, layer=L)
    counts = intersection_counts(trace[L].act, core)
    idx = np.arange(*span) if span else np.arange(len(counts) - 1)
    ordered = sorted(((int(counts[i]), int(i)) for i in idx), key=lambda t: (-t[0], t[1]))
    sorted_counts = to_csv(((L, rank, c, tok) for rank, (c, tok) in enumerate(ordered)), ("layer", "rank", "count", "token"))
    bins_header = ("x_lo", "x_hi", "y_mean", "n")
    as_rows = lambda bins: [tuple(b[k] for k in bins_header) for b in bins]  # noqa: E731
    return {
        "sorted_counts.csv": sorted_counts,
        "coactivation_bins.csv": to_csv(as_rows(obs2.bins), bins_header),
        "matching_bins.csv": to_csv(as_rows(matching.bins), bins_header),
    }


def _validators(args, weights) -> tuple[list[cr.ValidationSummary], dict[str, str]]:
    _check_layer(args, weights)
    prompt, trace, span = _analysis(args, weights, args.prompt_seed)
    L = args.layer
    seeds = [args.prompt_seed + k for k in range(args.n_prompts)]
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        per_trace = list(pool.map(lambda s: _matching_one(args, weights, s), seeds))
    summaries = [
        cr.validate_observation1(weights),
        cr.validate_observation2(trace, L, seed=args.prompt_seed),
        cr.validate_insight1(trace, L, weights=weights),
        cr.validate_insight2(trace, L, w_down=weights.layers[L].wd),
        cr.pool_matching(per_trace),
    ]
    figs = _figure_csvs(args, weights, trace, span, summaries[1], per_trace[0])
    return summaries, figs


def cmd_validate(args) -> int:
    out = Outputs(args)
    weights = _load(args, out)
    summaries, figs = _validators(args, weights)
    out.add("validation.json", _dump({
        "schema_version": REPORT_SCHEMA_VERSION, "summaries": [s.to_dict() for s in summaries],
    }))
    for name, text in figs.items():
        out.add(name, text)
    out.flush()
    for s in summaries:
        stat = "n/a" if s.statistic is None else f"{s.statistic:.4g}"
        print(f"{s.name:<15} {s.verdict:<12} {s.metric}={stat} threshold={s.threshold}")
        broken = s.details.get("broken_premises")
        if broken:
            print(f"  broken premises: {', '.join(broken)}")
    return EXIT_OK if all(s.passed for s in summaries) else EXIT_FAIL


def cmd_plot_data(args) -> int:
    out = Outputs(args)
    weights = _load(args, out)
    _check_layer(args, weights)
    _, trace, span = _analysis(args, weights, args.prompt_seed)
    obs2 = cr.validate_observation2(trace, args.layer, seed=args.prompt_seed)
    matching = _matching_one(args, weights, args.prompt_seed)
    for name, text in _figure_csvs(args, weights, trace, span, obs2, matching).items():
        out.add(name, text)
    out.flush()
    if not args.out:
        for name, text in out.files.items():
            print(f"# {name}\n{text}", end="")
    return EXIT_OK


def cmd_flops(args) -> int:
    out = Outputs(args)
    if args.preset:
        dims = PRESETS[args.preset]
        protected = 64 if args.protected is None else args.protected
    elif args.model:
        dims = CostDims.from_config(load_weights(args.model).config)
        protected = 0 if args.protected is None else args.protected
    else:
        raise InvalidParam("flops needs --preset or --model")
    if args.kept is None:
        n_after = args.prompt
    else:
        if args.kept > args.prompt:
            raise InvalidParam("--kept cannot exceed --prompt")
        n_after = min(args.kept + protected, args.prompt)
    rep = flops_model(
        dims, args.prompt, n_after, args.prune_layer, args.beta, n_generated=args.generated,
        neuron_sparsity=not args.no_neuron_sparse,
    )
    mem = memory_model(dims, args.prompt, n_after, args.beta if not args.no_neuron_sparse else 1.0)
    report = {"schema_version": REPORT_SCHEMA_VERSION, "dims": dims.__dict__, "n_after_prune": n_after,
              "cost": rep.to_dict(), "memory": mem}
    out.add("cost.json", _dump(report))
    out.flush()
    print(f"# {rep.convention}")
    print(f"prefill dense  {rep.prefill_flops_dense / 1e12:.3f} TFLOPs")
    print(f"prefill sparse {rep.prefill_flops_sparse / 1e12:.3f} TFLOPs  ratio {rep.prefill_ratio:.4f}")
    print(f"decode/token dense  {rep.decode_flops_per_token_dense / 1e9:.3f} GFLOPs")
    print(f"decode/token sparse {rep.decode_flops_per_token_sparse / 1e9:.3f} GFLOPs  ratio {rep.decode_ratio:.4f}")
    print(f"kv ratio {mem['kv_ratio']:.4f}  ffn resident ratio {mem['ffn_ratio']:.4f}")
    return EXIT_OK


def cmd_rerun(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidParam(f"manifest is not valid JSON: {exc}") from None
    if manifest.get("manifest_version") != MANIFEST_VERSION:
        raise InvalidParam(f"unsupported manifest version {manifest.get('manifest_version')!r}")
    replay = argparse.Namespace(**manifest["args"], out=args.out)
    if replay.command == "rerun":
        raise InvalidParam("cannot rerun a rerun manifest")
    recorded = manifest.get("model_checksum")
    if recorded is not None and getattr(replay, "model", None) and file_checksum(replay.model) != recorded:
        raise InvalidParam("model file changed since the manifest was written")
    return COMMANDS[replay.command](replay)


COMMANDS = {
    "gen-model": cmd_gen_model, "run": cmd_run, "dense": cmd_dense, "validate": cmd_validate,
    "plot-data": cmd_plot_data, "flops": cmd_flops, "rerun": cmd_rerun,
}


# ------------------------------------------------------------------ parser


def _unit(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is outside [0, 1]")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is outside (0, 1]")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} must be positive")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"{text} must be non-negative")
    return v


def _prompt_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("prompt")
    g.add_argument("--tokens", help="comma-separated token ids (no image block)")
    g.add_argument("--prompt-seed", type=_nonneg, default=0, help="seed of the synthetic image-text prompt")
    g.add_argument("--n-image", type=_positive, default=48)
    g.add_argument("--n-prefix", type=_nonneg, default=4)
    g.add_argument("--n-suffix", type=_positive, default=8)


def _sparsity_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("sparsity")
    g.add_argument("--rho", type=_fraction, default=0.2)
    g.add_argument("--beta", type=_fraction, default=0.4)
    g.add_argument("--prune-layer", type=_nonneg, default=2)
    g.add_argument("--prunable-span", help="START:END token range eligible for pruning")
    g.add_argument("--no-token-prune", action="store_true")
    g.add_argument("--no-neuron-sparse", action="store_true")
    g.add_argument("--drop-early-kv", action="store_true",
                   help="also drop pruned tokens from caches below --prune-layer")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="corematch", description="Co-adaptive token and neuron pruning on toy decoders.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-model", help="create synthetic weights")
    g.add_argument("path")
    g.add_argument("--layers", type=_positive, default=4)
    g.add_argument("--dmodel", type=_positive, default=32)
    g.add_argument("--dffn", type=_positive, default=128)
    g.add_argument("--heads", type=_positive, default=4)
    g.add_argument("--vocab", type=_positive, default=256)
    g.add_argument("--max-seq", type=_positive, default=512)
    g.add_argument("--activation", choices=("relu", "silu"), default="relu")
    g.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    g.add_argument("--ortho", type=_unit, default=1.0, help="orthogonality mix in [0, 1]")
    g.add_argument("--scale", type=float, default=1.0)
    g.add_argument("--theta", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", help="directory to write into instead of PATH's own")

    for name, help_ in (("run", "sparse generation"), ("dense", "dense reference generation")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--model", required=True)
        p.add_argument("--max-new", type=_nonneg, default=8)
        p.add_argument("--out")
        _prompt_flags(p)
        if name == "run":
            _sparsity_flags(p)
            p.add_argument("--format", default="csv,json", help="comma-separated subset of csv,json")

    for name, help_ in (("validate", "run the validator suite"), ("plot-data", "emit binned figure data")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--model", required=True)
        p.add_argument("--layer", type=int, default=2)
        p.add_argument("--rho", type=_fraction, default=0.2)
        p.add_argument("--beta", type=_fraction, default=0.4)
        p.add_argument("--out")
        _prompt_flags(p)
        if name == "validate":
            p.add_argument("--n-prompts", type=_positive, default=20,
                           help="prompts pooled by the matching validator")

    f = sub.add_parser("flops", help="closed-form cost report")
    src = f.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(PRESETS))
    src.add_argument("--model")
    f.add_argument("--prompt", type=_positive, default=675)
    f.add_argument("--kept", type=_nonneg, help="prunable tokens kept after --prune-layer")
    f.add_argument("--protected", type=_nonneg,
                   help="tokens never pruned (text); default 64 for presets, 0 for --model")
    f.add_argument("--prune-layer", type=_nonneg, default=2)
    f.add_argument("--beta", type=_fraction, default=0.4)
    f.add_argument("--generated", type=_nonneg, default=0)
    f.add_argument("--no-neuron-sparse", action="store_true")
    f.add_argument("--out")

    r = sub.add_parser("rerun", help="replay a manifest")
    r.add_argument("manifest")
    r.add_argument("--out")
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CoreMatchError as exc:
        if isinstance(exc, InvalidParam):
            parser.print_usage(sys.stderr)
        print(f"corematch: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"corematch: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # pragma: no cover - last resort
        print(f"corematch: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
