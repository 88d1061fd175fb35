"""align-lab: gen -> train -> attack -> eval -> detect, one re-runnable stage per subcommand."""

import argparse
import csv
import json
import logging
import shutil
import sys
import tempfile
from contextlib import contextmanager
from functools import wraps
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

from .config import RunConfig
from .errors import AlignLabError, ContractError
from .logging_utils import configure_logging, track_stage
from .lab_tools.artifacts import (
    checkpoint_vocabulary,
    export_image8,
    load_checkpoint,
    load_tensor,
    quantization_survival,
    read_manifest,
    save_checkpoint,
    save_tensor,
    write_manifest,
)
from .lab_tools.attack import AttackPair, AttackResult, AttackTrace, TraceRecord, run_attack_batch
from .lab_tools.corpus import CorpusItem, Vocabulary, class_captions, generate_corpus, split_items, token_count
from .lab_tools.detect import probe_batch, sweep_rates
from .lab_tools.encoders import ModelParams, encode_images, init_params
from .lab_tools.metrics import (
    EvalRow,
    amplify_diff,
    caption_embeddings,
    classification_matrix,
    closer_to_target,
    cosine_report,
    distortion,
    fit_pca,
    project,
    psnr,
    ssim,
    success_rate,
    summarize_by_token_count,
    summarize_rows,
)
from .lab_tools.training import contrastive_train, evaluate_zero_shot

load_dotenv()

logger = logging.getLogger(__name__)

CORPUS_COLUMNS = ["item_id", "class_id", "split", "caption", "image", "preview"]
PAIR_COLUMNS = ["pair_id", "image_id", "source_caption", "target_text"]
RESULT_COLUMNS = ["pair_id", "image_id", "source_caption", "target_text", "converged", "steps",
                  "final_loss", "final_cosine", "initial_cosine", "adv", "trace"]


def _fmt(value: float) -> str:
    return format(float(value), ".8g")


# ---------------------------------------------------------------------------
# stage directories
# ---------------------------------------------------------------------------

@contextmanager
def staged_output(cfg: RunConfig, stage: str, force: bool):
    """Build a stage's outputs in a scratch directory and move it into place on success."""
    target = _claim(cfg, stage, force)
    target.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{stage}-", dir=target.parent))
    try:
        yield scratch
        cfg.echo(scratch)
        if target.exists():
            shutil.rmtree(target)
        scratch.rename(target)
        logger.info(f"Wrote {stage} outputs to {target}")
    finally:
        if scratch.exists():
            shutil.rmtree(scratch)


def _claim(cfg: RunConfig, stage: str, force: bool) -> Path:
    """Fail before any work when a stage directory exists and --force is absent."""
    target = cfg.stage_dir(stage)
    if target.exists() and not force:
        raise ContractError(f"{target} already exists; pass --force to overwrite it")
    return target


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ContractError(f"{path} not found; run `align-lab {producer}` first")
    return path


def load_corpus(cfg: RunConfig) -> List[CorpusItem]:
    directory = cfg.stage_dir("corpus")
    rows = read_manifest(_require(directory / "manifest.tsv", "gen"), required=CORPUS_COLUMNS[:5])
    return [CorpusItem(item_id=int(row["item_id"]), image=load_tensor(directory / row["image"]).data,
                       caption=row["caption"], class_id=int(row["class_id"]), split=row["split"])
            for row in rows]


def load_model(cfg: RunConfig) -> Tuple[ModelParams, Vocabulary]:
    model = load_checkpoint(_require(cfg.stage_dir("model") / "checkpoint.fckp", "train"), cfg.model)
    return model, checkpoint_vocabulary(model)


def load_attack_results(cfg: RunConfig, items: Sequence[CorpusItem]) -> Tuple[List[Dict[str, str]], List[AttackResult]]:
    directory = cfg.stage_dir("attack")
    rows = read_manifest(_require(directory / "results.tsv", "attack"), required=RESULT_COLUMNS)
    by_id = {item.item_id: item for item in items}
    results = []
    for row in rows:
        item = by_id.get(int(row["image_id"]))
        if item is None:
            raise ContractError(f"attack pair {row['pair_id']} refers to unknown image {row['image_id']}")
        records = []
        with open(directory / row["trace"], newline="", encoding="utf-8") as handle:
            for rec in csv.DictReader(handle):
                records.append(TraceRecord(step=int(rec["step"]), loss=float(rec["loss"]),
                                           cosine=float(rec["cosine"]), mean_abs_diff=float(rec["mean_abs_diff"])))
        results.append(AttackResult(
            image=load_tensor(directory / row["adv"]).data,
            original=item.image,
            target_text=row["target_text"],
            converged=row["converged"] == "true",
            steps=int(row["steps"]),
            final_loss=float(row["final_loss"]),
            final_cosine=float(row["final_cosine"]),
            trace=AttackTrace(initial=records[0], records=records[1:]),
        ))
    return rows, results


def caption_set(cfg: RunConfig, extra: Sequence[str] = ()) -> List[str]:
    """Class captions followed by any other target texts, first occurrence order."""
    captions = class_captions(cfg.corpus)
    for text in extra:
        if text not in captions:
            captions.append(text)
    return captions


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _command(func):
    """Map handled errors to the error result dict."""
    @wraps(func)
    def wrapper(cfg: RunConfig, *args, **kwargs):
        try:
            return func(cfg, *args, **kwargs)
        except (AlignLabError, ValidationError, OSError) as e:
            logger.error(f"{func.__name__} failed: {e}")
            return {"status": "error", "message": str(e)}
    return wrapper


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

@track_stage("gen")
@_command
def cmd_gen(cfg: RunConfig, force: bool = False) -> Dict:
    """Render the shapes corpus into <out>/corpus."""
    _claim(cfg, "corpus", force)
    items = generate_corpus(cfg.corpus, cfg.model.image_size)
    with staged_output(cfg, "corpus", force) as out:
        (out / "images").mkdir()
        rows = []
        for item in items:
            stem = f"images/{item.item_id:05d}"
            save_tensor(out / f"{stem}.ften", item.image)
            export_image8(out / f"{stem}.ppm", item.image)
            rows.append({"item_id": item.item_id, "class_id": item.class_id, "split": item.split,
                         "caption": item.caption, "image": f"{stem}.ften", "preview": f"{stem}.ppm"})
        write_manifest(out / "manifest.tsv", CORPUS_COLUMNS, rows)
    return {
        "status": "success",
        "count": len(items),
        "classes": len(class_captions(cfg.corpus)),
        "held_out": len(split_items(items, "held-out")),
        "output": str(cfg.stage_dir("corpus")),
    }


@track_stage("train")
@_command
def cmd_train(cfg: RunConfig, force: bool = False) -> Dict:
    """Contrastively train the two-tower model and checkpoint it into <out>/model."""
    target = _claim(cfg, "model", force)
    items = load_corpus(cfg)
    vocab = Vocabulary.default()
    model = init_params(cfg.model, cfg.train.seed)
    trained, history = contrastive_train(model, items, cfg.train, vocab)
    held_out = split_items(items, "held-out") or split_items(items, "train")
    accuracy = evaluate_zero_shot(trained, held_out, class_captions(cfg.corpus), vocab)
    trained = trained.with_weights(trained.weights, held_out_accuracy=accuracy)
    with staged_output(cfg, "model", force) as out:
        save_checkpoint(out / "checkpoint.fckp", trained)
        _write_csv(out / "loss_history.csv", ["epoch", "loss"],
                   [[epoch + 1, _fmt(loss)] for epoch, loss in enumerate(history)])
    return {"status": "success", "accuracy": accuracy, "final_loss": history[-1], "epochs": len(history),
            "output": str(target)}


def sample_pairs(cfg: RunConfig, items: Sequence[CorpusItem], captions: Sequence[str], num_pairs: int,
                 one_image_all_targets: bool = False) -> List[AttackPair]:
    """Random (image, mismatched caption) pairs drawn from the held-out split."""
    rng = np.random.default_rng(cfg.attack.seed)
    pool = split_items(items, "held-out") or list(items)
    if not pool:
        raise ContractError("corpus is empty")
    if one_image_all_targets:
        item = pool[int(rng.integers(len(pool)))]
        targets = [c for c in captions if c != item.caption]
        return [AttackPair(pair_id=i, image_id=item.item_id, source_caption=item.caption, target_text=t,
                           image=item.image) for i, t in enumerate(targets)]
    pairs = []
    for pair_id in range(num_pairs):
        item = pool[int(rng.integers(len(pool)))]
        choices = [c for c in captions if c != item.caption]
        if not choices:
            raise ContractError("caption set has no mismatched caption to target")
        pairs.append(AttackPair(pair_id=pair_id, image_id=item.item_id, source_caption=item.caption,
                                target_text=choices[int(rng.integers(len(choices)))], image=item.image))
    return pairs


def read_pairs(path, items: Sequence[CorpusItem]) -> List[AttackPair]:
    by_id = {item.item_id: item for item in items}
    pairs = []
    for i, row in enumerate(read_manifest(path, required=["image_id", "target_text"])):
        item = by_id.get(int(row["image_id"]))
        if item is None:
            raise ContractError(f"{path}: unknown image_id {row['image_id']}")
        pairs.append(AttackPair(pair_id=int(row.get("pair_id") or i), image_id=item.item_id,
                                source_caption=item.caption, target_text=row["target_text"], image=item.image))
    return pairs


@track_stage("attack")
@_command
def cmd_attack(cfg: RunConfig, force: bool = False, pairs_path: Optional[str] = None,
               num_pairs: Optional[int] = None, one_image_all_targets: bool = False) -> Dict:
    """Align images to target texts and record results and traces into <out>/attack."""
    _claim(cfg, "attack", force)
    model, vocab = load_model(cfg)
    items = load_corpus(cfg)
    if pairs_path:
        pairs = read_pairs(pairs_path, items)
    else:
        pairs = sample_pairs(cfg, items, class_captions(cfg.corpus), num_pairs or cfg.num_pairs,
                             one_image_all_targets)
    if not pairs:
        raise ContractError("no attack pairs to run")
    results = run_attack_batch(model, pairs, cfg.attack, vocab, jobs=cfg.jobs)

    with staged_output(cfg, "attack", force) as out:
        (out / "adv").mkdir()
        (out / "traces").mkdir()
        rows = []
        for pair, result in zip(pairs, results):
            adv = f"adv/{pair.pair_id:04d}.ften"
            trace = f"traces/{pair.pair_id:04d}.csv"
            save_tensor(out / adv, result.image)
            result.trace.to_csv(out / trace)
            rows.append({"pair_id": pair.pair_id, "image_id": pair.image_id, "source_caption": pair.source_caption,
                         "target_text": pair.target_text, "converged": str(result.converged).lower(),
                         "steps": result.steps, "final_loss": _fmt(result.final_loss),
                         "final_cosine": _fmt(result.final_cosine),
                         "initial_cosine": _fmt(result.trace.initial.cosine), "adv": adv, "trace": trace})
        write_manifest(out / "results.tsv", RESULT_COLUMNS, rows)
        write_manifest(out / "pairs.tsv", PAIR_COLUMNS, rows)

    converged = sum(r.converged for r in results)
    if converged < len(results):
        logger.warning(f"{len(results) - converged} of {len(results)} pairs did not converge")
    return {"status": "success", "count": len(results), "converged": converged,
            "output": str(cfg.stage_dir("attack"))}


@track_stage("eval")
@_command
def cmd_eval(cfg: RunConfig, force: bool = False) -> Dict:
    """Distortion, quality, success, cosine and projection reports into <out>/eval."""
    _claim(cfg, "eval", force)
    model, vocab = load_model(cfg)
    items = load_corpus(cfg)
    rows, results = load_attack_results(cfg, items)
    if not results:
        raise ContractError("attack results are empty")
    ecfg = cfg.eval
    captions = caption_set(cfg, [r.target_text for r in results])
    rate, flags = success_rate(results, model, captions, vocab)

    report: List[EvalRow] = []
    for row, result, success in zip(rows, results, flags):
        stats = distortion(result.original, result.image, ecfg.thresholds)
        report.append(EvalRow(
            pair_id=int(row["pair_id"]), image_id=int(row["image_id"]), source_caption=row["source_caption"],
            target_text=result.target_text, target_tokens=token_count(result.target_text),
            converged=result.converged, success=success, steps=result.steps, final_cosine=result.final_cosine,
            l2=stats.l2, linf=stats.linf, mean_abs=stats.mean_abs,
            psnr=psnr(result.original, result.image, cap=ecfg.psnr_cap),
            ssim=ssim(result.original, result.image, ecfg.ssim_window, ecfg.ssim_k1, ecfg.ssim_k2),
            quantization_survived=quantization_survival(result, model, captions, vocab),
            pixels_above=stats.pixels_above,
        ))

    cosines = cosine_report(model, captions, results, vocab, ecfg.histogram_bin_width)
    basis = fit_pca(encode_images(np.stack([item.image for item in items]), model), ecfg.pca_components)
    aligned_embs = encode_images(np.stack([r.image for r in results]), model)
    original_embs = encode_images(np.stack([r.original for r in results]), model)
    target_embs = caption_embeddings(model, [r.target_text for r in results], vocab)
    source_embs = caption_embeddings(model, [row["source_caption"] for row in rows], vocab)
    closer = [closer_to_target(basis, a, t, s)
              for a, t, s, r in zip(aligned_embs, target_embs, source_embs, results) if r.converged]

    summary = {
        "overall": summarize_rows(report, ecfg.thresholds),
        "by_target_tokens": summarize_by_token_count(report, ecfg.thresholds),
        "cosine": {
            "max_text_pair": max(cosines.text_pairs),
            "min_aligned": min(cosines.aligned),
            "mean_original": float(np.mean(cosines.original)),
            "overlap": cosines.overlap,
        },
        "pca": {
            "components": basis.k,
            "eigenvalues": basis.eigenvalues.tolist(),
            "explained_fraction": float(basis.eigenvalues.sum() / basis.total_variance),
            "closer_to_target_fraction": float(np.mean(closer)) if closer else 0.0,
        },
        "success_rate": rate,
    }

    with staged_output(cfg, "eval", force) as out:
        columns = list(EvalRow.model_fields)[:-1]
        threshold_columns = [f"above_{t:g}" for t in sorted(ecfg.thresholds)]
        _write_csv(out / "report.csv", columns + threshold_columns,
                   [[_cell(getattr(r, c)) for c in columns] + [r.pixels_above[float(t)] for t in sorted(ecfg.thresholds)]
                    for r in report])
        with open(out / "summary.json", "w", encoding="utf-8") as handle:
            json.dump(summary, handle, indent=2, sort_keys=True)
        edges = cosines.bin_edges
        _write_csv(out / "cosine_histogram.csv", ["bin_low", "bin_high", "text_pairs", "aligned", "original"],
                   [[_fmt(edges[i]), _fmt(edges[i + 1]), cosines.histograms["text_pairs"][i],
                     cosines.histograms["aligned"][i], cosines.histograms["original"][i]]
                    for i in range(len(edges) - 1)])
        pca_rows = []
        for row, a, o, t, s in zip(rows, aligned_embs, original_embs, target_embs, source_embs):
            for kind, emb in (("original", o), ("aligned", a), ("target_text", t), ("source_text", s)):
                pca_rows.append([row["pair_id"], kind] + [_fmt(v) for v in project(emb, basis)])
        _write_csv(out / "pca_coordinates.csv", ["pair_id", "kind"] + [f"pc{i + 1}" for i in range(basis.k)],
                   pca_rows)
        matrix = classification_matrix(model, np.stack([r.image for r in results]), captions, vocab)
        _write_csv(out / "classification_matrix.csv", ["pair_id", "target_text"] + captions,
                   [[row["pair_id"], row["target_text"]] + [_fmt(p) for p in probs]
                    for row, probs in zip(rows, matrix)])
        (out / "diffs").mkdir()
        for row, result in zip(rows, results):
            export_image8(out / "diffs" / f"{int(row['pair_id']):04d}.ppm",
                          amplify_diff(result.original, result.image, ecfg.diff_factor))

    return {"status": "success", "count": len(report), "success_rate": rate, "overlap": cosines.overlap,
            "output": str(cfg.stage_dir("eval"))}


def _cell(value):
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return _fmt(value)
    return value


@track_stage("detect")
@_command
def cmd_detect(cfg: RunConfig, force: bool = False, sigmas: Optional[Sequence[float]] = None) -> Dict:
    """Noise-probe clean held-out images and converged attacks into <out>/detect."""
    _claim(cfg, "detect", force)
    model, vocab = load_model(cfg)
    items = load_corpus(cfg)
    rows, results = load_attack_results(cfg, items)
    clean = split_items(items, "held-out")
    attacked = [(row, r) for row, r in zip(rows, results) if r.converged]
    if not clean or not attacked:
        raise ContractError(f"detection needs clean and attacked images (got {len(clean)} clean, "
                            f"{len(attacked)} converged attacks)")

    dcfg = cfg.detect
    sweep = sorted(set(sigmas or dcfg.sigmas))
    grid = sorted(set(sweep) | {dcfg.sigma})
    captions = dcfg.captions or caption_set(cfg, [r.target_text for r in results])
    text_embs = caption_embeddings(model, captions, vocab)
    images = [item.image for item in clean] + [r.image for _, r in attacked]
    provenance = [False] * len(clean) + [True] * len(attacked)
    names = [f"item-{item.item_id}" for item in clean] + [f"pair-{row['pair_id']}" for row, _ in attacked]

    verdicts = probe_batch(images, model, dcfg, text_embs, grid, jobs=cfg.jobs, progress=True)
    at_sigma = grid.index(dcfg.sigma)
    rows_out = [[name, "attacked" if is_attacked else "clean", v[at_sigma].verdict, v[at_sigma].agreement,
                 _fmt(dcfg.sigma), v[at_sigma].base_label]
                for name, is_attacked, v in zip(names, provenance, verdicts)]
    table = sweep_rates([[v[grid.index(s)] for s in sweep] for v in verdicts], provenance, sweep)

    with staged_output(cfg, "detect", force) as out:
        _write_csv(out / "detection_report.csv",
                   ["image", "provenance", "verdict", "agreement", "sigma", "base_label"], rows_out)
        _write_csv(out / "detection_sweep.csv",
                   ["sigma", "tpr", "fpr", "true_positives", "false_positives", "positives", "negatives"],
                   [[_fmt(r.sigma), _fmt(r.true_positive_rate), _fmt(r.false_positive_rate), r.true_positives,
                     r.false_positives, r.positives, r.negatives] for r in table])

    best = max(table, key=lambda r: r.true_positive_rate - r.false_positive_rate)
    return {"status": "success", "count": len(images), "best_sigma": best.sigma,
            "best_tpr": best.true_positive_rate, "best_fpr": best.false_positive_rate,
            "output": str(cfg.stage_dir("detect"))}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _sigma_list(text: str) -> List[float]:
    try:
        values = [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid sigma list {text!r}")
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError("sigmas must be positive")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="align-lab", description=__doc__)
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--seed", type=int, help="Master seed for every stage")
    parser.add_argument("--out", help="Output root (default: $ALIGN_LAB_OUT_ROOT or ./runs)")
    parser.add_argument("--jobs", type=int, help="Worker processes for attack and detect batches")
    parser.add_argument("--force", action="store_true", help="Overwrite an existing stage directory")
    parser.add_argument("--log-level", help="Logging level (default: $ALIGN_LAB_LOG_LEVEL or INFO)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", help="Render the synthetic shapes corpus")
    sub.add_parser("train", help="Train the two-tower model")
    attack = sub.add_parser("attack", help="Align images to target texts")
    attack.add_argument("--pairs", help="TSV manifest with image_id and target_text columns")
    attack.add_argument("--num-pairs", type=int, help="Random pairs when no manifest is given")
    attack.add_argument("--one-image-all-targets", action="store_true",
                        help="Align one held-out image to every other caption")
    sub.add_parser("eval", help="Compute metrics and plot data for the attack results")
    detect = sub.add_parser("detect", help="Run the noise-probe detector")
    detect.add_argument("--sigmas", type=_sigma_list, help="Comma-separated sweep grid")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_yaml(args.config) if args.config else RunConfig()
    return cfg.with_overrides(seed=args.seed, out_dir=args.out, jobs=args.jobs)


def run(args) -> Dict:
    try:
        cfg = resolve_config(args)
    except (ValidationError, OSError) as e:
        logger.error(f"Invalid configuration: {e}")
        return {"status": "error", "message": str(e)}
    if args.command == "gen":
        return cmd_gen(cfg, force=args.force)
    if args.command == "train":
        return cmd_train(cfg, force=args.force)
    if args.command == "attack":
        return cmd_attack(cfg, force=args.force, pairs_path=args.pairs, num_pairs=args.num_pairs,
                          one_image_all_targets=args.one_image_all_targets)
    if args.command == "eval":
        return cmd_eval(cfg, force=args.force)
    return cmd_detect(cfg, force=args.force, sigmas=args.sigmas)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    result = run(args)
    if result.get("status") != "success":
        print(f"error: {result.get('message')}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
