"""Command-line surface for the whole pipeline.

Subcommands: gen-synth, train, eval-retrieval, eval-classify, simmat,
zscore, bench, inspect.  Every run writes exactly one manifest holding
the resolved config, 64-bit FNV-1a digests of all input and output
files, wall-clock, and format versions, so a deterministic run is fully
reproducible from its manifest.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 numerical failure.

numpy is imported lazily, after --threads / PIVOTALIGN_THREADS has been
applied to the BLAS thread-pool environment variables.
"""

import argparse
import json
import os
import sys
import time

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4

_THREAD_ENV_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")


def fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def fnv1a64_file(path) -> str:
    h = _FNV_OFFSET
    with open(str(path), "rb") as fh:
        while chunk := fh.read(1 << 20):
            for byte in chunk:
                h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return f"{h:016x}"


class ManifestWriter:
    """Collects one run's config, inputs, and outputs; writes a single JSON."""

    def __init__(self, command: str, config: dict):
        from . import __version__

        self.body = {
            "command": command,
            "config": config,
            "inputs": {},
            "outputs": {},
            "versions": {"pivotalign": __version__, "ueb": 1, "upc": 1},
            "started_unix": time.time(),
        }

    def add_input(self, path):
        if path:
            self.body["inputs"][str(path)] = fnv1a64_file(path)

    def add_output(self, path):
        if path:
            self.body["outputs"][str(path)] = fnv1a64_file(path)

    def write(self, path) -> None:
        self.body["wall_s"] = time.time() - self.body["started_unix"]
        with open(str(path), "w", encoding="utf-8") as fh:
            json.dump(self.body, fh, indent=2, sort_keys=True)


def _args_snapshot(args) -> dict:
    """argparse namespace minus the handler callback, JSON-ready."""
    return {k: v for k, v in vars(args).items() if k != "func"}


def _bank_sidecars(path):
    """Bank file plus whichever sidecars exist."""
    out = [path]
    for suffix in (".meta.json", ".labels"):
        if os.path.exists(str(path) + suffix):
            out.append(str(path) + suffix)
    return out


def _require_file(path):
    if not os.path.isfile(str(path)):
        raise FileNotFoundError(f"missing input file: {path}")
    return path


def _load_heads(ckpt_dir):
    from .projector import load_head

    f_c = load_head(_require_file(os.path.join(ckpt_dir, "f_c.upc")))
    f_m = load_head(_require_file(os.path.join(ckpt_dir, "f_m.upc")))
    if f_c.out_dim != f_m.out_dim:
        raise ValueError(
            f"checkpoint heads disagree on shared dim: {f_c.out_dim} vs {f_m.out_dim}"
        )
    return f_c, f_m


def _cmd_gen_synth(args):
    from .synth import SynthConfig, generate, write_dataset

    cfg = SynthConfig(
        latent_dim=args.latent_dim,
        clip_dim=args.clip_dim,
        multi_dim=args.multi_dim,
        n_concepts=args.concepts,
        samples_per_concept=args.samples_per_concept,
        heldout_per_concept=args.heldout_per_concept,
        map_noise=args.noise,
        seed=args.seed,
    )
    manifest = ManifestWriter("gen-synth", _args_snapshot(args) | {"config": cfg.__dict__})
    dataset = generate(cfg)
    artifact_map = write_dataset(dataset, args.out_dir)
    for path in artifact_map["artifacts"].values():
        for p in _bank_sidecars(path):
            manifest.add_output(p)
    manifest.write(os.path.join(args.out_dir, "manifest.json"))
    print(f"wrote synthetic dataset to {args.out_dir}")
    return 0


def _cmd_train(args):
    from .alignment import LossConfig
    from .bank import read_bank
    from .projector import save_head
    from .trainer import TrainConfig, train

    loss = LossConfig(
        tau_retrieval=args.tau,
        tau_nce=args.tau,
        sigma=args.sigma2**0.5,
        lambda_intra=getattr(args, "lambda"),
        use_text=not args.no_text,
        use_pseudo=not args.no_pseudo,
        use_intra=not args.no_intra,
        use_perturbation=not args.no_perturb,
    )
    cfg = TrainConfig(
        loss=loss,
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        weight_decay=args.wd,
        seed=args.seed,
        deterministic=args.deterministic,
    )
    manifest = ManifestWriter("train", _args_snapshot(args))
    inputs = [args.queries_clip, args.queries_multi, args.image_bank, args.text_bank]
    for path in inputs:
        _require_file(path)
        for p in _bank_sidecars(path):
            manifest.add_input(p)

    f_c, f_m, log = train(
        read_bank(args.queries_clip),
        read_bank(args.queries_multi),
        read_bank(args.image_bank),
        read_bank(args.text_bank),
        cfg,
    )
    os.makedirs(args.out, exist_ok=True)
    paths = {
        "f_c": os.path.join(args.out, "f_c.upc"),
        "f_m": os.path.join(args.out, "f_m.upc"),
        "log": os.path.join(args.out, "trainlog.ndjson"),
    }
    # Atomic checkpoint writes: temp file then rename.
    for name, head in (("f_c", f_c), ("f_m", f_m)):
        tmp = paths[name] + ".tmp"
        save_head(head, tmp)
        os.replace(tmp, paths[name])
    log.write_ndjson(paths["log"])
    for p in paths.values():
        manifest.add_output(p)
    manifest.write(os.path.join(args.out, "manifest.json"))
    final = log.records[-1]["loss"] if log.records else float("nan")
    print(
        f"trained f_c ({f_c.n_params:,} params) and f_m ({f_m.n_params:,} params); "
        f"final step loss {final:.6f}"
    )
    return 0


def _read_eval_banks(args, names):
    from .bank import read_bank

    banks = {}
    for name in names:
        path = getattr(args, name)
        _require_file(path)
        banks[name] = read_bank(path)
    return banks


def _cmd_eval_retrieval(args):
    import numpy as np

    from .bank import read_labels
    from .evaluation import caption_group_truth, project_rows, retrieval_report, write_records_json

    manifest = ManifestWriter("eval-retrieval", _args_snapshot(args))
    f_c, f_m = _load_heads(args.ckpt)
    banks = _read_eval_banks(args, ("images", "captions"))
    for name in ("images", "captions"):
        for p in _bank_sidecars(getattr(args, name)):
            manifest.add_input(p)

    ground_truth = None
    if args.labels:
        labels = read_labels(_require_file(args.labels))
        manifest.add_input(args.labels)
        if labels.shape[0] != banks["captions"].rows:
            raise ValueError("labels length must equal caption rows")
        ground_truth = caption_group_truth(labels)

    ks = [int(k) for k in args.k.split(",") if k.strip()]
    image_rows = project_rows(f_c, np.asarray(banks["images"].data))
    text_rows = project_rows(f_m, np.asarray(banks["captions"].data))
    report = retrieval_report(image_rows, text_rows, ks=ks, ground_truth=ground_truth,
                              direction=args.direction)
    for direction, per_k in sorted(report.recalls.items()):
        for k, v in sorted(per_k.items()):
            print(f"{direction} R@{k}: {v:.2f}")
    if args.json_out:
        write_records_json(report.records(), args.json_out)
        manifest.add_output(args.json_out)
    manifest.write(args.manifest_out or _default_manifest(args.json_out, "eval-retrieval"))
    return 0


def _cmd_eval_classify(args):
    import numpy as np

    from .bank import read_labels
    from .evaluation import classify_zero_shot, project_rows, write_records_json

    manifest = ManifestWriter("eval-classify", _args_snapshot(args))
    f_c, f_m = _load_heads(args.ckpt)
    banks = _read_eval_banks(args, ("images", "classes"))
    labels = read_labels(_require_file(args.labels))
    for name in ("images", "classes"):
        for p in _bank_sidecars(getattr(args, name)):
            manifest.add_input(p)
    manifest.add_input(args.labels)

    image_rows = project_rows(f_c, np.asarray(banks["images"].data))
    class_rows = project_rows(f_m, np.asarray(banks["classes"].data))
    report = classify_zero_shot(image_rows, class_rows, labels)
    print(f"macro F1: {report.macro_f1:.4f} over {len(report.f1)} classes")
    if args.json_out:
        write_records_json(report.records(), args.json_out)
        manifest.add_output(args.json_out)
    manifest.write(args.manifest_out or _default_manifest(args.json_out, "eval-classify"))
    return 0


def _cmd_simmat(args):
    import numpy as np

    from .evaluation import project_rows, similarity_matrix

    manifest = ManifestWriter("simmat", _args_snapshot(args))
    f_c, f_m = _load_heads(args.ckpt)
    banks = _read_eval_banks(args, ("bank_a", "bank_b"))
    for name in ("bank_a", "bank_b"):
        for p in _bank_sidecars(getattr(args, name)):
            manifest.add_input(p)

    rows_a = project_rows(f_c, np.asarray(banks["bank_a"].data))
    rows_b = project_rows(f_m, np.asarray(banks["bank_b"].data))
    mat = similarity_matrix(rows_a, rows_b, csv_path=args.csv_out, pgm_path=args.pgm_out)
    print(f"similarity matrix {mat.shape[0]}x{mat.shape[1]}, "
          f"diag mean {np.mean(np.diag(mat)) if mat.shape[0] == mat.shape[1] else float('nan'):.4f}")
    for out in (args.csv_out, args.pgm_out):
        if out:
            manifest.add_output(out)
    manifest.write(args.manifest_out or _default_manifest(args.csv_out or args.pgm_out, "simmat"))
    return 0


def _cmd_zscore(args):
    from .evaluation import zscore_per_language

    manifest = ManifestWriter("zscore", _args_snapshot(args))
    _require_file(args.scores)
    manifest.add_input(args.scores)
    scores = {}
    import csv as _csv

    with open(args.scores, newline="", encoding="utf-8") as fh:
        for row in _csv.reader(fh):
            if not row or row[0].strip().lower() == "model":
                continue
            if len(row) != 3:
                raise ValueError(f"scores CSV rows must be model,language,value: {row}")
            model, lang, value = row[0].strip(), row[1].strip(), float(row[2])
            scores.setdefault(model, {})[lang] = value
    result = zscore_per_language(scores)
    for lang, z in result.items():
        print(f"{lang}: {z:+.4f}")
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
        manifest.add_output(args.json_out)
    manifest.write(args.manifest_out or _default_manifest(args.json_out, "zscore"))
    return 0


def _cmd_bench(args):
    import numpy as np

    from .evaluation import bench_inference
    from .projector import load_head

    manifest = ManifestWriter("bench", _args_snapshot(args))
    head = load_head(_require_file(args.ckpt))
    head.mode = "inference"
    banks = _read_eval_banks(args, ("bank",))
    for p in _bank_sidecars(args.bank):
        manifest.add_input(p)
    report = bench_inference(head, np.asarray(banks["bank"].data), args.repeats)
    print(f"rows: {report.rows}  repeats: {report.repeats}")
    print(f"projection ms/sample: median {report.projection_ms_median:.6f} "
          f"mean {report.projection_ms_mean:.6f}")
    print(f"search ms/sample:     median {report.search_ms_median:.6f} "
          f"mean {report.search_ms_mean:.6f}")
    print(f"total ms/sample:      median {report.total_ms_median:.6f} "
          f"mean {report.total_ms_mean:.6f}")
    manifest.write(args.manifest_out or _default_manifest(None, "bench"))
    return 0


def _describe_head(name, head):
    print(f"{name}: {head.in_dim} -> {head.hidden_dim} -> {head.out_dim}  "
          f"mode={head.mode}  trainable params: {head.n_params:,}")


def _cmd_inspect(args):
    manifest = ManifestWriter("inspect", _args_snapshot(args))
    if args.ckpt:
        f_c, f_m = _load_heads(args.ckpt)
        for stem in ("f_c.upc", "f_m.upc"):
            manifest.add_input(os.path.join(args.ckpt, stem))
        _describe_head("f_c", f_c)
        _describe_head("f_m", f_m)
        print(f"total trainable parameters: {f_c.n_params + f_m.n_params:,}")
    else:
        from .numerics import Rng
        from .projector import init_head

        f_c = init_head(512, 1024, 512, Rng(0))
        f_m = init_head(768, 1536, 512, Rng(0))
        _describe_head("f_c (default)", f_c)
        _describe_head("f_m (default)", f_m)
        print(f"total trainable parameters: {f_c.n_params + f_m.n_params:,}")
    manifest.write(args.manifest_out or _default_manifest(None, "inspect"))
    return 0


def _default_manifest(primary_output, command):
    if primary_output:
        return str(primary_output) + ".manifest.json"
    return f"{command}-manifest.json"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pivotalign",
        description="Pivot-based alignment of frozen embedding spaces.",
    )
    parser.add_argument("--threads", type=int, default=None,
                        help="cap BLAS worker threads (env fallback PIVOTALIGN_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate the synthetic oracle dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--concepts", type=int, default=100)
    p.add_argument("--latent-dim", type=int, default=16)
    p.add_argument("--clip-dim", type=int, default=64)
    p.add_argument("--multi-dim", type=int, default=96)
    p.add_argument("--samples-per-concept", type=int, default=60)
    p.add_argument("--heldout-per-concept", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.05)
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("train", help="train both projection heads")
    p.add_argument("--queries-clip", required=True)
    p.add_argument("--queries-multi", required=True)
    p.add_argument("--image-bank", required=True)
    p.add_argument("--text-bank", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch", type=int, default=2048)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--tau", type=float, default=0.01)
    p.add_argument("--sigma2", type=float, default=0.004)
    p.add_argument("--lambda", type=float, default=1.0)
    p.add_argument("--wd", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--no-text", action="store_true", help="ablation: drop the same-query loss")
    p.add_argument("--no-pseudo", action="store_true", help="ablation: drop the retrieved-pair loss")
    p.add_argument("--no-intra", action="store_true", help="ablation: drop the attractive term")
    p.add_argument("--no-perturb", action="store_true", help="ablation: train without noise")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval-retrieval", help="bidirectional R@k retrieval")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--labels", default=None,
                   help="caption-group labels; default is index pairing")
    p.add_argument("--k", default="1,5,10")
    p.add_argument("--direction", choices=("both", "i2t", "t2i"), default="both")
    p.add_argument("--json-out", default=None)
    p.add_argument("--manifest-out", default=None)
    p.set_defaults(func=_cmd_eval_retrieval)

    p = sub.add_parser("eval-classify", help="zero-shot classification, macro F1")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--json-out", default=None)
    p.add_argument("--manifest-out", default=None)
    p.set_defaults(func=_cmd_eval_classify)

    p = sub.add_parser("simmat", help="cosine similarity matrix export")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bank-a", required=True, help="projected through f_c")
    p.add_argument("--bank-b", required=True, help="projected through f_m")
    p.add_argument("--csv-out", default=None)
    p.add_argument("--pgm-out", default=None)
    p.add_argument("--manifest-out", default=None)
    p.set_defaults(func=_cmd_simmat)

    p = sub.add_parser("zscore", help="per-language z-scores from a scores CSV")
    p.add_argument("--scores", required=True, help="CSV rows: model,language,value")
    p.add_argument("--json-out", default=None)
    p.add_argument("--manifest-out", default=None)
    p.set_defaults(func=_cmd_zscore)

    p = sub.add_parser("bench", help="projection + top-k search timing")
    p.add_argument("--ckpt", required=True, help="a single .upc checkpoint file")
    p.add_argument("--bank", required=True)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--manifest-out", default=None)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("inspect", help="head shapes, parameter counts, checkpoint metadata")
    p.add_argument("--ckpt", default=None, help="checkpoint directory (default: Table shapes)")
    p.add_argument("--manifest-out", default=None)
    p.set_defaults(func=_cmd_inspect)

    return parser


def _apply_thread_cap(argv):
    threads = None
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    if threads is None:
        threads = os.environ.get("PIVOTALIGN_THREADS")
    if threads is None:
        return
    try:
        n = max(1, int(threads))
    except ValueError:
        return  # argparse reports the usage error later
    if "numpy" in sys.modules:
        return  # too late to cap the pools; the flag still parses
    for var in _THREAD_ENV_VARS:
        os.environ.setdefault(var, str(n))


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _apply_thread_cap(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0

    from .bank import BankFormatError
    from .projector import CheckpointError
    from .trainer import NumericalError

    try:
        return args.func(args)
    except (FileNotFoundError, BankFormatError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
