"""End-to-end experiment pipeline: corpus, training, fusion decodes, analysis.

One `run_pipeline` call reproduces the whole study at desk scale for one
seed: generate the synthetic task, pre-train the external LM (plus an
oracle LM on the test transcripts), train the baseline transducer,
fine-tune cold fusion both iteratively and from scratch, tune λ on dev,
decode the test set under every fusion mode (including LM hot-swaps),
and emit WER tables and the breakdown report. Every artifact lands
under the output directory and is byte-deterministic given the seed;
wall-clock timings go to timing.json only.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .corpus import (
    CorpusSpec,
    GeneratedCorpus,
    Utterance,
    Vocabulary,
    detokenize,
    generate_corpus,
    word_counts,
    write_dataset,
    write_text_corpus,
)
from .decoder import DecodeConfig, DecodeSession, format_nbest
from .evaluation import breakdown_report, categorize, corpus_wer
from .models import (
    LmConfig,
    NeuralLM,
    TransducerConfig,
    TransducerModel,
    load_lm,
    load_transducer,
    save_checkpoint,
)
from .training import (
    CF_SCHEDULE,
    LM_SCHEDULE,
    RNNT_SCHEDULE,
    TrainRecipe,
    did_not_converge,
    finetune_coldfusion,
    train_lm,
    train_rnnt,
    write_training_log,
)

FUSION_LABELS = {"sf": "shallow", "cf": "cold", "sf_cf": "shallow_cold"}


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 7
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    lm_epochs: int = 3
    oracle_lm_epochs: int = 30
    rnnt_epochs: int = 12
    cf_epochs: int = 6
    scratch_epochs: int = 12
    batch_size: int = 32
    lm_batch_size: int = 128
    beam_size: int = 15
    max_symbols_per_frame: int = 3
    lambda_grid_sf: tuple[float, ...] = (0.2, 0.3, 0.4, 0.5)
    lambda_grid_sf_cf: tuple[float, ...] = (0.1, 0.2, 0.3)
    tune_utterances: int = 100
    threads: int = 1

    @classmethod
    def smoke(cls, seed: int = 7) -> "PipelineConfig":
        """Reduced-scale config for determinism checks and quick runs."""
        return cls(
            seed=seed,
            corpus=CorpusSpec(
                seed=seed,
                paired_sentence_count=80,
                unpaired_sentence_count=400,
                dev_count=24,
                test_count=40,
                rare_test_sentences=1,
                oov_test_sentences=1,
                rare_paired_occurrences=2,
                rare_unpaired_occurrences=12,
            ),
            lm_epochs=2,
            oracle_lm_epochs=4,
            rnnt_epochs=2,
            cf_epochs=2,
            scratch_epochs=2,
            beam_size=4,
            lambda_grid_sf=(0.3,),
            lambda_grid_sf_cf=(0.2,),
            tune_utterances=8,
        )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _decode_one(model, lm, swap_to, frames, config):
    session = DecodeSession(model, lm, config)
    if swap_to is not None:
        session.swap_lm(swap_to)
    session.feed(frames)
    return session.finish()


def decode_set(
    model: TransducerModel,
    lm: NeuralLM | None,
    utts: list[Utterance],
    config: DecodeConfig,
    swap_to: NeuralLM | None = None,
    threads: int = 1,
) -> dict[str, tuple]:
    """Decode a list of utterances; returns id -> (tokens, DecodeResult)."""
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(lambda u: _decode_one(model, lm, swap_to, u.frames, config), utts)
            )
    else:
        results = [_decode_one(model, lm, swap_to, u.frames, config) for u in utts]
    return {u.id: (r.best.tokens, r) for u, r in zip(utts, results)}


def _hyp_words(decodes: dict, vocab: Vocabulary) -> dict[str, list[str]]:
    return {uid: [vocab.word(t) for t in tokens] for uid, (tokens, _) in decodes.items()}


def _write_nbest(path: Path, decodes: dict, vocab: Vocabulary) -> None:
    lines = []
    for uid in sorted(decodes):
        lines.extend(format_nbest(uid, decodes[uid][1], vocab))
    path.write_text("".join(line + "\n" for line in lines))


@dataclass
class PipelineResult:
    outdir: Path
    results: dict
    corpus: GeneratedCorpus


def run_pipeline(cfg: PipelineConfig, outdir) -> PipelineResult:
    outdir = Path(outdir)
    for sub in ("corpus", "checkpoints", "logs", "decodes", "reports"):
        (outdir / sub).mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}
    results: dict = {"seed": cfg.seed, "config": _config_summary(cfg)}

    def stage(name: str):
        timings[name] = time.monotonic()
        return name

    def done(name: str):
        timings[name] = round(time.monotonic() - timings[name], 3)

    # 1. corpus ---------------------------------------------------------------
    stage("corpus")
    corpus = generate_corpus(cfg.corpus)
    vocab = corpus.vocab
    cfg.corpus.to_json(outdir / "corpus" / "spec.json")
    vocab.to_file(outdir / "corpus" / "vocab.txt")
    for split in ("train", "dev", "test"):
        write_dataset(outdir / "corpus" / f"{split}.tsv", getattr(corpus, split), vocab)
    write_text_corpus(outdir / "corpus" / "unpaired.txt", corpus.unpaired, vocab)
    write_text_corpus(outdir / "corpus" / "oracle.txt", corpus.oracle, vocab)
    done("corpus")

    refs = {u.id: list(u.reference) for u in corpus.test}
    ref_words = {uid: [vocab.word(t) for t in seq] for uid, seq in refs.items()}
    dev_refs_words = {u.id: [vocab.word(t) for t in u.reference] for u in corpus.dev}

    # 2. external LM + oracle LM ----------------------------------------------
    stage("train_lm")
    lm_recipe = TrainRecipe(
        mode="lm", epochs=cfg.lm_epochs, batch_size=cfg.lm_batch_size,
        seed=cfg.seed, schedule=LM_SCHEDULE,
    )
    dev_sentences = [u.reference for u in corpus.dev]
    lm, lm_log = train_lm(lm_recipe, corpus.unpaired, dev_sentences, vocab)
    lm_path = outdir / "checkpoints" / "lm.ckpt"
    save_checkpoint(lm, lm_path)
    write_training_log(outdir / "logs" / "lm.tsv", lm_log)
    results["lm_dev_ppl"] = lm_log[-1].dev_ppl
    done("train_lm")

    stage("train_oracle_lm")
    oracle_recipe = TrainRecipe(
        mode="lm", epochs=cfg.oracle_lm_epochs, batch_size=cfg.lm_batch_size,
        seed=cfg.seed + 1, schedule=LM_SCHEDULE,
    )
    oracle_lm, oracle_log = train_lm(oracle_recipe, corpus.oracle, corpus.oracle, vocab)
    oracle_path = outdir / "checkpoints" / "oracle_lm.ckpt"
    save_checkpoint(oracle_lm, oracle_path)
    write_training_log(outdir / "logs" / "oracle_lm.tsv", oracle_log)
    results["oracle_lm_train_ppl"] = oracle_log[-1].dev_ppl
    done("train_oracle_lm")

    # 3. baseline transducer ----------------------------------------------------
    stage("train_rnnt")
    rnnt_recipe = TrainRecipe(
        mode="rnnt", epochs=cfg.rnnt_epochs, batch_size=cfg.batch_size,
        seed=cfg.seed, schedule=RNNT_SCHEDULE,
    )
    model, rnnt_log = train_rnnt(rnnt_recipe, corpus.train, corpus.dev, vocab)
    rnnt_path = outdir / "checkpoints" / "rnnt.ckpt"
    save_checkpoint(model, rnnt_path)
    write_training_log(outdir / "logs" / "rnnt.tsv", rnnt_log)
    done("train_rnnt")

    # 4. cold fusion, iterative and from scratch -------------------------------
    lm_sha_before = _sha256(lm_path)
    stage("finetune_cf")
    cf_recipe = TrainRecipe(
        mode="cf_iterative", epochs=cfg.cf_epochs, batch_size=cfg.batch_size,
        seed=cfg.seed, schedule=CF_SCHEDULE, init_from=(str(rnnt_path), str(lm_path)),
    )
    cf_model, cf_lm, cf_log = finetune_coldfusion(
        cf_recipe, str(rnnt_path), str(lm_path), corpus.train, corpus.dev
    )
    cf_path = outdir / "checkpoints" / "cf_iterative.ckpt"
    save_checkpoint(cf_model, cf_path)
    write_training_log(outdir / "logs" / "cf_iterative.tsv", cf_log)
    lm_after_path = outdir / "checkpoints" / "lm_after_cf.ckpt"
    save_checkpoint(cf_lm, lm_after_path)
    results["lm_sha_before"] = lm_sha_before
    results["lm_sha_after"] = _sha256(lm_after_path)
    done("finetune_cf")

    stage("finetune_cf_scratch")
    scratch_recipe = TrainRecipe(
        mode="cf_scratch", epochs=cfg.scratch_epochs, batch_size=cfg.batch_size,
        seed=cfg.seed, schedule=RNNT_SCHEDULE, init_from=(str(lm_path),),
    )
    scratch_model, _, scratch_log = finetune_coldfusion(
        scratch_recipe, None, str(lm_path), corpus.train, corpus.dev,
        scratch_config=model.config,
    )
    scratch_path = outdir / "checkpoints" / "cf_scratch.ckpt"
    save_checkpoint(scratch_model, scratch_path)
    write_training_log(outdir / "logs" / "cf_scratch.tsv", scratch_log)
    results["dev_loss"] = {
        "cf_iterative": cf_log[-1].dev_loss,
        "cf_scratch": scratch_log[-1].dev_loss,
    }
    results["scratch_did_not_converge"] = did_not_converge(scratch_log)
    done("finetune_cf_scratch")

    # 5. λ tuning on dev ---------------------------------------------------------
    stage("tune_lambda")
    tune_utts = corpus.dev[: cfg.tune_utterances]
    tune_refs = {u.id: [vocab.word(t) for t in u.reference] for u in tune_utts}

    def dev_wer_at(model_, lm_, mode: str, lam: float) -> float:
        config = DecodeConfig(
            beam_size=cfg.beam_size, lam=lam,
            max_symbols_per_frame=cfg.max_symbols_per_frame, fusion_mode=mode,
        )
        decodes = decode_set(model_, lm_, tune_utts, config, threads=cfg.threads)
        return corpus_wer(tune_refs, _hyp_words(decodes, vocab)).wer

    sweeps = {"sf": [], "sf_cf": []}
    for lam in cfg.lambda_grid_sf:
        sweeps["sf"].append((dev_wer_at(model, lm, "shallow", lam), lam))
    for lam in cfg.lambda_grid_sf_cf:
        sweeps["sf_cf"].append((dev_wer_at(cf_model, lm, "shallow_cold", lam), lam))
    lam_sf = min(sweeps["sf"])[1]
    lam_sf_cf = min(sweeps["sf_cf"])[1]
    results["lambda"] = {"sf": lam_sf, "sf_cf": lam_sf_cf}
    results["lambda_sweep"] = {
        k: [{"lambda": lam, "dev_wer": w} for w, lam in v] for k, v in sweeps.items()
    }
    done("tune_lambda")

    # 6. test decodes -------------------------------------------------------------
    stage("decode_test")

    def cfg_for(mode: str, lam: float = 0.0) -> DecodeConfig:
        return DecodeConfig(
            beam_size=cfg.beam_size, lam=lam,
            max_symbols_per_frame=cfg.max_symbols_per_frame, fusion_mode=mode,
        )

    lm_same = load_lm(lm_path)  # fresh copy of the identical LM, for the swap check
    systems = {
        "none": (model, None, cfg_for("none"), None),
        "sf": (model, lm, cfg_for("shallow", lam_sf), None),
        "cf": (cf_model, lm, cfg_for("cold"), None),
        "sf_cf": (cf_model, lm, cfg_for("shallow_cold", lam_sf_cf), None),
        "cf_swap_same": (cf_model, lm, cfg_for("cold"), lm_same),
        "cf_swap_oracle": (cf_model, lm, cfg_for("cold"), oracle_lm),
    }
    test_decodes = {}
    wer_by_system = {}
    for name, (model_, lm_, dconfig, swap_to) in systems.items():
        decodes = decode_set(model_, lm_, corpus.test, dconfig, swap_to=swap_to, threads=cfg.threads)
        test_decodes[name] = decodes
        _write_nbest(outdir / "decodes" / f"test_{name}.nbest", decodes, vocab)
        wer_by_system[name] = corpus_wer(ref_words, _hyp_words(decodes, vocab)).wer
    results["wer"] = wer_by_system
    results["swap_same_identical"] = _same_decodes(test_decodes["cf"], test_decodes["cf_swap_same"])
    done("decode_test")

    # 7. dev decodes for the iterative-vs-scratch comparison ----------------------
    stage("decode_dev_cf")
    dev_wer = {}
    for name, model_ in (("cf_iterative", cf_model), ("cf_scratch", scratch_model)):
        decodes = decode_set(model_, lm, corpus.dev, cfg_for("cold"), threads=cfg.threads)
        _write_nbest(outdir / "decodes" / f"dev_{name}.nbest", decodes, vocab)
        dev_wer[name] = corpus_wer(dev_refs_words, _hyp_words(decodes, vocab)).wer
    results["dev_wer"] = dev_wer
    done("decode_dev_cf")

    # 8. analysis ------------------------------------------------------------------
    stage("analysis")
    paired_counts = word_counts([u.reference for u in corpus.train], vocab)
    union_counts = paired_counts + word_counts(corpus.unpaired, vocab)
    categories = categorize(ref_words, paired_counts, union_counts, cfg.corpus.rare_threshold)
    report = breakdown_report(
        ref_words,
        _hyp_words(test_decodes["none"], vocab),
        {
            "SF": _hyp_words(test_decodes["sf"], vocab),
            "CF": _hyp_words(test_decodes["cf"], vocab),
            "SF+CF": _hyp_words(test_decodes["sf_cf"], vocab),
        },
        categories,
    )
    results["breakdown"] = report.to_dict()
    results["category_counts"] = {
        cat: sum(1 for c in categories.values() if c == cat)
        for cat in ("Common", "Fixed by LM", "Rare/OOV")
    }
    (outdir / "reports" / "breakdown.txt").write_text(report.to_text())
    (outdir / "reports" / "breakdown.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=1) + "\n"
    )
    done("analysis")

    results_path = outdir / "results.json"
    results_path.write_text(json.dumps(results, sort_keys=True, indent=1) + "\n")
    (outdir / "reports" / "summary.txt").write_text(render_summary([results]))
    (outdir / "timing.json").write_text(json.dumps(timings, sort_keys=True, indent=1) + "\n")
    return PipelineResult(outdir=outdir, results=results, corpus=corpus)


def _config_summary(cfg: PipelineConfig) -> dict:
    summary = asdict(cfg)
    summary["corpus"] = asdict(cfg.corpus)
    return summary


def _same_decodes(a: dict, b: dict) -> bool:
    if set(a) != set(b):
        return False
    for uid in a:
        ta, ra = a[uid]
        tb, rb = b[uid]
        if ta != tb or [h.tokens for h in ra.nbest] != [h.tokens for h in rb.nbest]:
            return False
        if [h.log_score for h in ra.nbest] != [h.log_score for h in rb.nbest]:
            return False
    return True


def render_summary(results_list: list[dict]) -> str:
    """Human-readable tables; medians across runs when several are given."""

    def median(path: list[str]) -> float:
        vals = []
        for r in results_list:
            v = r
            for key in path:
                v = v[key]
            vals.append(v)
        return float(np.median(vals))

    n = len(results_list)
    seeds = [r["seed"] for r in results_list]
    lines = [f"Synthetic-task results ({n} run{'s' if n != 1 else ''}, seeds {seeds})", ""]
    lines.append("WER by fusion mode (median %):")
    for name, label in (
        ("none", "baseline (no fusion)"),
        ("sf", "shallow fusion"),
        ("cf", "cold fusion"),
        ("sf_cf", "shallow + cold"),
        ("cf_swap_same", "cold, swapped identical LM"),
        ("cf_swap_oracle", "cold, swapped oracle LM"),
    ):
        lines.append(f"  {label:<28} {100 * median(['wer', name]):6.2f}")
    lines.append("")
    lines.append("Iterative vs from-scratch cold fusion (dev, median):")
    lines.append(f"  {'iterative dev loss':<28} {median(['dev_loss', 'cf_iterative']):8.4f}")
    lines.append(f"  {'scratch   dev loss':<28} {median(['dev_loss', 'cf_scratch']):8.4f}")
    lines.append(f"  {'iterative dev WER %':<28} {100 * median(['dev_wer', 'cf_iterative']):8.2f}")
    lines.append(f"  {'scratch   dev WER %':<28} {100 * median(['dev_wer', 'cf_scratch']):8.2f}")
    flags = [r["scratch_did_not_converge"] for r in results_list]
    lines.append(f"  scratch did-not-converge flags: {flags}")
    lines.append("")
    lines.append("Relative WER reduction by word type (median %, SF / CF / SF+CF):")
    for cat in ("Common", "Fixed by LM", "Rare/OOV"):
        row = []
        for mode in ("SF", "CF", "SF+CF"):
            vals = []
            for r in results_list:
                for entry in r["breakdown"]["word_type"]:
                    if entry["name"] == cat:
                        vals.append(entry["relative_reduction"][mode])
            row.append(100 * float(np.median(vals)))
        lines.append(f"  {cat:<14} {row[0]:7.2f} {row[1]:7.2f} {row[2]:7.2f}")
    lines.append("")
    lines.append("Relative WER reduction by length (median %, SF / CF / SF+CF):")
    for cat in ("Short", "Medium", "Long"):
        row = []
        for mode in ("SF", "CF", "SF+CF"):
            vals = []
            for r in results_list:
                for entry in r["breakdown"]["length"]:
                    if entry["name"] == cat:
                        vals.append(entry["relative_reduction"][mode])
            row.append(100 * float(np.median(vals)))
        lines.append(f"  {cat:<14} {row[0]:7.2f} {row[1]:7.2f} {row[2]:7.2f}")
    return "\n".join(lines) + "\n"
