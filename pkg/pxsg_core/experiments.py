# Desk-scale experiment driver: the no-proxy baseline, the full system, the
# three loss ablations and a transfer run of a frozen pretrained generator on
# a second corpus. Every run is evaluated on held-out subjects and the
# directional checks are written to summary.json next to the run folders.

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .checkpoint import load_checkpoint
from .constants import Ablations, Defaults
from .evaluation import EvalReport, evaluate_system
from .phantom import Corpus, split, synthesize_corpus
from .settings import PhantomSpec, TrainConfig
from .trainer import run

logger = logging.getLogger(__name__)

TRAIN_FRACTION = 0.75


def _check(value: float, threshold: float, above: bool) -> Dict[str, Any]:
    passed = value >= threshold if above else value <= threshold
    return {"value": value, "threshold": threshold, "direction": ">=" if above else "<=", "passed": bool(passed)}


def _strict(value: float, reference: float, above: bool) -> Dict[str, Any]:
    passed = value > reference if above else value < reference
    return {"value": value, "reference": reference, "direction": ">" if above else "<", "passed": bool(passed)}


def _train_and_evaluate(
    name: str, config: TrainConfig, train: Corpus, test: Corpus, out_dir: Path, generator=None, attacker_steps: int = 0
) -> EvalReport:
    logger.info(f"Experiment '{name}' starting")
    result = run(config, train, out_dir / name, generator=generator)
    G, _ = load_checkpoint(result.checkpoints["generator"])
    S, _ = load_checkpoint(result.checkpoints["segmenter"])
    report = evaluate_system(G, S, test, seed=config.seed, attacker_steps=attacker_steps, attacker_corpus=train)
    report.write_json(out_dir / name / "evaluation.json")
    report.write_csv(out_dir / name / "histograms.csv")
    return report


def run_experiments(
    corpus: Corpus,
    out_dir: Union[str, Path],
    epochs: int = 100,
    seed: int = 0,
    base: Optional[TrainConfig] = None,
    transfer: bool = True,
    attacker_steps: int = Defaults.ATTACKER_STEPS,
) -> Dict[str, Any]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = (base or TrainConfig()).model_copy(update={"epochs": epochs, "seed": seed})
    train, test = split(corpus, TRAIN_FRACTION, seed)
    logger.info(f"Split {len(corpus)} subjects into {len(train)} train / {len(test)} test")

    no_proxy_config = TrainConfig.no_proxy(**base.model_dump(exclude={"weights", "freeze_generator"}))
    reports = {"no_proxy": _train_and_evaluate("no_proxy", no_proxy_config, train, test, out_dir, attacker_steps=attacker_steps)}
    reports["all_losses"] = _train_and_evaluate("all_losses", base, train, test, out_dir, attacker_steps=attacker_steps)
    for ablation in Ablations.ALL:
        name = f"no_{ablation}"
        reports[name] = _train_and_evaluate(
            name, base.with_ablations([ablation]), train, test, out_dir, attacker_steps=attacker_steps
        )

    full, baseline = reports["all_losses"], reports["no_proxy"]
    checks: Dict[str, Any] = {
        "baseline_dice": _check(baseline.dsc.overall, 0.85, above=True),
        "baseline_clean_map": _check(baseline.reid["clean_image"].mean_ap, 0.8, above=True),
        "full_dice_gap": _check(abs(baseline.dsc.overall - full.dsc.overall), 0.1, above=False),
        "full_image_map": _check(full.reid["deformed_image"].mean_ap, 2 * full.reid["deformed_image"].chance, above=False),
        "full_segmap_map": _check(full.reid["deformed_segmap"].mean_ap, 2 * full.reid["deformed_segmap"].chance, above=False),
        "full_roundtrip_ms_ssim": _check(full.reconstruction.ms_ssim, 0.95, above=True),
        "full_roundtrip_dice": _check(full.reconstruction.dice, 0.95, above=True),
        "no_inv_roundtrip_ms_ssim": _check(reports["no_inv"].reconstruction.ms_ssim, 0.85, above=False),
        "no_smt_roundtrip_below_full": _strict(reports["no_smt"].reconstruction.ms_ssim, full.reconstruction.ms_ssim, above=False),
        "no_div_image_map_above_full": _strict(reports["no_div"].reid["deformed_image"].mean_ap, full.reid["deformed_image"].mean_ap, above=True),
        "no_div_segmap_map_above_full": _strict(reports["no_div"].reid["deformed_segmap"].mean_ap, full.reid["deformed_segmap"].mean_ap, above=True),
        "clean_histogram_intersection": _check(full.histograms["clean_images"].intersection, 0.5, above=False),
        "deformed_histogram_intersection": _check(full.histograms["deformed_images"].intersection, 0.8, above=True),
    }
    if attacker_steps:
        for representation in ("image", "segmap"):
            key = f"deformed_{representation}_siamese"
            checks[f"full_{representation}_f1_below_baseline"] = _strict(full.reid[key].f1, baseline.reid[key].f1, above=False)

    if transfer:
        spec = PhantomSpec(
            n_subjects=len(corpus),
            dims=corpus.dims,
            seed=seed + 1,
            classes=4,
            shell_radii=(0.45, 0.75, 1.0),
        )
        other_train, other_test = split(synthesize_corpus(spec), TRAIN_FRACTION, seed)
        G, _ = load_checkpoint(out_dir / "all_losses" / "g.ckpt")
        network = base.network.model_copy(update={"classes": spec.classes})
        config = base.model_copy(update={"network": network, "freeze_generator": True})
        reports["transfer"] = _train_and_evaluate(
            "transfer", config, other_train, other_test, out_dir, generator=G, attacker_steps=attacker_steps
        )
        checks["transfer_roundtrip_ms_ssim"] = _check(reports["transfer"].reconstruction.ms_ssim, 0.95, above=True)

    summary = {
        "epochs": epochs,
        "seed": seed,
        "runs": {name: report.model_dump(mode="json", exclude={"histograms"}) for name, report in reports.items()},
        "checks": checks,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    failed = [name for name, check in checks.items() if not check["passed"]]
    if failed:
        logger.warning(f"Directional checks not met: {', '.join(failed)}")
    else:
        logger.info("All directional checks met")
    return summary
