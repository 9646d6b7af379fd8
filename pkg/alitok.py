"""
alitok command line: data generation, two-stage tokenizer training, AR
training, sampling and the evaluation/analysis commands.

    python alitok.py gen-data --config configs/desk.json
    python alitok.py train-tok --stage 1 --config configs/desk.json
    python alitok.py sample --class 3 --n 4 --seed 7 --out samples/

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
import argparse
import os
import sys

# BLAS thread caps must be in place before numpy loads
THREADS = os.environ.get("ALITOK_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ[_var] = THREADS

import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from sklearn.metrics import accuracy_score  # noqa: E402

from models import AliTokError  # noqa: E402
from models.ablation_suite import AblationBudget, AblationSuite  # noqa: E402
from models.analysis_metrics import (  # noqa: E402
    attention_asymmetry, reconstruct_batches, row_error_frame,
)
from models.ar_generator import ARModel, build_token_dataset, evaluate_ar, train_ar  # noqa: E402
from models.autodiff import no_grad  # noqa: E402
from models.checkpoint_io import load_checkpoint, save_checkpoint  # noqa: E402
from models.image_io import write_ppm  # noqa: E402
from models.kv_sampler import BENCH_COLUMNS, SamplingConfig, bench_cache, generate_batch  # noqa: E402
from models.optim import MissingCheckpointError  # noqa: E402
from models.run_config import load_run_config, write_run_config  # noqa: E402
from models.synthetic_data import MANIFEST_NAME, SyntheticDataPreparer, SyntheticDataset  # noqa: E402
from models.tokenizer import (  # noqa: E402
    EncodedSequence, decode_stage1, decode_stage2, encode_split, train_tokenizer,
)
from models.tracking import log_artifact, tracked_run  # noqa: E402
from models.vq_codebook import export_codebook_csv  # noqa: E402

# --- Run directory layout ---
TOK_STAGE1 = "tokenizer_stage1.altk"
TOK_STAGE2 = "tokenizer_stage2.altk"
AR_CKPT = "ar.altk"
TOKENS_TRAIN = "tokens_train.bin"
TOKENS_EVAL = "tokens_eval.bin"


class CliUsageError(Exception):
    pass


class _CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliUsageError(f"{self.prog}: {message}")


# --- Shared helpers ---

def _resolve(args):
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg.override_seed(args.seed)
    if args.data_dir is not None:
        cfg.paths["data_dir"] = args.data_dir
    if args.out is not None:
        if args.command == "gen-data":
            cfg.paths["data_dir"] = args.out
        elif args.command != "sample":
            cfg.paths["run_dir"] = args.out
    return cfg


def _dataset(cfg):
    data_dir = cfg.paths["data_dir"]
    if not os.path.exists(os.path.join(data_dir, MANIFEST_NAME)):
        print(f"⚠️ No dataset manifest in {data_dir}; regenerating splits from the config "
              "(pass --data-dir to use the output of gen-data --out)")
    return SyntheticDataset.load(data_dir, cfg.synthetic_spec())


def _require(path, what):
    if not os.path.exists(path):
        raise MissingCheckpointError(f"{what} not found at {path}")
    return path


def _load_tokenizer(cfg, prefer_stage2=True):
    stage2 = cfg.path(TOK_STAGE2)
    if prefer_stage2 and os.path.exists(stage2):
        return load_checkpoint(stage2)
    return load_checkpoint(_require(cfg.path(TOK_STAGE1), "stage-1 tokenizer checkpoint (run train-tok --stage 1)"))


def _save_frame(frame, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False)
    log_artifact(path)
    print(f"💾 Saved: {path}")


def _save_model(model, path):
    save_checkpoint(model, path)
    log_artifact(path)
    print(f"💾 Checkpoint saved to: {path}")


def _decode_tokens(tokenizer, tokens):
    seq = EncodedSequence(indices=np.asarray(tokens, dtype=np.int64), continuous=None)
    with no_grad():
        recon = decode_stage2(seq, tokenizer) if tokenizer.has_stage2 else decode_stage1(seq, tokenizer)
    return recon.image.data


# --- Commands ---

def cmd_gen_data(args, cfg):
    SyntheticDataPreparer(cfg.synthetic_spec(), cfg.paths["data_dir"]).run_pipeline()


def cmd_train_tok(args, cfg):
    dataset = _dataset(cfg)
    steps = int(cfg.training["tok_steps" if args.stage == 1 else "tok2_steps"])
    seed = cfg.seed("tokenizer")
    model = None
    if args.stage == 2:
        model = load_checkpoint(
            _require(cfg.path(TOK_STAGE1), "stage-2 training needs the stage-1 tokenizer checkpoint")
        )
        before = encode_split(model, dataset, "eval")

    model, metrics = train_tokenizer(
        dataset, model.cfg if model else cfg.tok_config(), args.stage, steps,
        cfg.optimizer_config("tok"), seed, model=model, log_every=int(cfg.training["log_every"]),
    )

    if args.stage == 2:
        if not np.array_equal(before, encode_split(model, dataset, "eval")):
            raise AliTokError("encoder indices changed during stage-2 training")
        print("✅ Frozen encoder: eval-split token ids unchanged by stage 2.")

    write_run_config(cfg, cfg.path("run_config.json"))
    _save_frame(metrics, cfg.path(f"tok_stage{args.stage}_metrics.csv"))
    _save_model(model, cfg.path(TOK_STAGE1 if args.stage == 1 else TOK_STAGE2))


def cmd_train_ar(args, cfg):
    tokenizer = _load_tokenizer(cfg, prefer_stage2=False)
    tokens = build_token_dataset(tokenizer, _dataset(cfg), "train", cfg.path(TOKENS_TRAIN))
    ar_cfg = cfg.ar_config(tokenizer.cfg)
    model, metrics = train_ar(
        tokens, ar_cfg, int(cfg.training["ar_steps"]), cfg.optimizer_config("ar"),
        cfg.seed("ar"), log_every=int(cfg.training["log_every"]),
    )
    write_run_config(cfg, cfg.path("run_config.json"))
    _save_frame(metrics, cfg.path("ar_metrics.csv"))
    _save_model(model, cfg.path(AR_CKPT))


def _sampling_config(args, cfg):
    values = cfg.sampling_config().to_dict()
    if args.temperature is not None:
        values["temperature"] = args.temperature
    if args.cfg_scale is not None:
        values["guidance_scale"] = args.cfg_scale
        values["use_cfg"] = args.cfg_scale > 1.0
    if args.scaler_power is not None:
        values["scaler_power"] = args.scaler_power
    values["seed"] = cfg.seed("sample")
    return SamplingConfig(**values)


def cmd_sample(args, cfg):
    model = load_checkpoint(_require(cfg.path(AR_CKPT), "AR checkpoint (run train-ar)"))
    tokenizer = _load_tokenizer(cfg)
    scfg = _sampling_config(args, cfg)
    if not 0 <= args.class_id < model.cfg.classes:
        raise ValueError(f"--class must lie in [0, {model.cfg.classes}), got {args.class_id}")

    print(f"🚀 Sampling {args.n} images of class {args.class_id} "
          f"(T={scfg.temperature}, cfg={scfg.use_cfg}, G={scfg.guidance_scale}, kv_cache={not args.no_kv_cache})...")
    result = generate_batch(model, [args.class_id] * args.n, scfg, scfg.seed, use_cache=not args.no_kv_cache)
    images = _decode_tokens(tokenizer, result.tokens)

    out_dir = args.out or cfg.path("samples")
    for i, image in enumerate(images):
        write_ppm(image, os.path.join(out_dir, f"class{args.class_id}_seed{scfg.seed}_{i:03d}.ppm"))
    print(f"💾 {len(images)} samples written to {out_dir} in {result.duration_s:.2f}s of generation")


def cmd_eval_recon(args, cfg):
    dataset = _dataset(cfg)
    tokenizer = _load_tokenizer(cfg)
    images = dataset.images("eval")
    stages = [1, 2] if tokenizer.has_stage2 else [1]
    recons = {stage: reconstruct_batches(tokenizer, images, stage) for stage in stages}

    for stage, recon in recons.items():
        frame = row_error_frame(recon, images, tokenizer.cfg.f)
        summary = frame.iloc[-1]
        print(f"📊 Stage {stage}: mse {summary['mse']:.5f} | row1 {summary['row1_mse']:.5f} "
              f"| rest {summary['rest_mse']:.5f}")
        _save_frame(frame, cfg.path(f"recon_stage{stage}.csv"))

    preview_dir = cfg.path("recon_previews")
    for i in range(min(args.n, len(images))):
        panel = np.concatenate([images[i]] + [recons[s][i] for s in stages], axis=1)
        write_ppm(panel, os.path.join(preview_dir, f"eval_{i:03d}.ppm"))
    print("💾 Side-by-side previews (input | " + " | ".join(f"stage {s}" for s in stages) + f") in {preview_dir}")


def cmd_eval_acc(args, cfg):
    model = load_checkpoint(_require(cfg.path(AR_CKPT), "AR checkpoint (run train-ar)"))
    tokenizer = _load_tokenizer(cfg, prefer_stage2=False)
    tokens = build_token_dataset(tokenizer, _dataset(cfg), "eval", cfg.path(TOKENS_EVAL))
    report = evaluate_ar(model, tokens, batch_size=int(cfg.training["eval_batch"]))

    recount = accuracy_score(report["targets"].reshape(-1), report["predictions"].reshape(-1))
    if abs(recount - report["accuracy"]) > 1e-12:
        raise ValueError(f"accuracy {report['accuracy']} disagrees with independent recount {recount}")
    print(f"📊 Eval loss {report['loss']:.5f} | accuracy {report['accuracy']:.4f} "
          f"(prefix {report['prefix_accuracy']:.4f}, grid {report['grid_accuracy']:.4f}) | 1/V = {1 / model.cfg.vocab:.4f}")
    row = {k: report[k] for k in ("loss", "accuracy", "prefix_accuracy", "grid_accuracy")}
    _save_frame(pd.DataFrame([row]), cfg.path("ar_eval.csv"))


def cmd_attn_stats(args, cfg):
    tokenizer = _load_tokenizer(cfg)
    stage = args.stage or (2 if tokenizer.has_stage2 else 1)
    layers = [int(v) for v in args.layers.split(",")] if args.layers else None
    images = _dataset(cfg).images("eval")[:args.images]
    report = attention_asymmetry(tokenizer, images, stage=stage, layer_select=layers, scope=args.scope)

    print(f"📊 Stage-{stage} decoder mean 3x3 attention ({report.tokens} tokens per image):")
    print(pd.DataFrame(report.grid, index=["-1", "0", "+1"], columns=["-1", "0", "+1"]).to_string(float_format="%.4f"))
    print(f"   causal_share = {report.causal_share:.4f}")
    _save_frame(report.to_frame(), cfg.path(f"attn_stats_stage{stage}.csv"))


def cmd_ablate(args, cfg):
    budget = AblationBudget(
        tok_steps=int(cfg.training["tok_steps"]),
        tok2_steps=int(cfg.training["tok2_steps"]),
        ar_steps=int(cfg.training["ar_steps"]),
        seeds=[int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed("tokenizer")],
    )
    base_tok = {k: v for k, v in cfg.tokenizer.items() if k != "K"}
    labels = args.labels.split(",") if args.labels else None
    AblationSuite(
        _dataset(cfg), budget, base_tok=base_tok, ar_overrides=cfg.ar, labels=labels,
        optimizer_tok=cfg.optimizer_config("tok"), optimizer_ar=cfg.optimizer_config("ar"),
        output_dir=cfg.path("ablation"), log_every=int(cfg.training["log_every"]),
    ).run_pipeline()


def cmd_bench_cache(args, cfg):
    if os.path.exists(cfg.path(AR_CKPT)):
        model = load_checkpoint(cfg.path(AR_CKPT))
    else:
        print("⚠️ No AR checkpoint found; benchmarking a freshly initialized model.")
        model = ARModel(cfg.ar_config(), seed=cfg.seed("ar"))
    scfg = cfg.sampling_config()
    print(f"🚀 Benchmarking KV cache: seq_len {model.cfg.seq_len}, batch {args.batch}...")
    row = bench_cache(model, args.batch, scfg, seed=cfg.seed("sample"))
    print(f"📊 cached {row['cached_s']:.3f}s | uncached {row['uncached_s']:.3f}s | speedup {row['speedup']:.2f}x "
          f"| prefix share of steps {row['prefix_share']:.3f}")
    if not row["identical"]:
        raise AliTokError("cached and uncached generation produced different tokens")
    _save_frame(pd.DataFrame([row], columns=BENCH_COLUMNS), cfg.path("bench_cache.csv"))


def cmd_export_codebook(args, cfg):
    tokenizer = _load_tokenizer(cfg, prefer_stage2=False)
    path = cfg.path("codebook.csv")
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame = export_codebook_csv(tokenizer.codebook, path)
    log_artifact(path)
    print(f"💾 Codebook ({len(frame)} codes x {tokenizer.cfg.d_c} dims) exported to: {path}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic dataset manifest and previews"),
    "train-tok": (cmd_train_tok, "train tokenizer stage 1 or 2"),
    "train-ar": (cmd_train_ar, "train the AR generator on cached tokenizer ids"),
    "sample": (cmd_sample, "sample class-conditional images"),
    "eval-recon": (cmd_eval_recon, "reconstruction error report and side-by-side previews"),
    "eval-acc": (cmd_eval_acc, "AR loss and accuracy on the eval split"),
    "attn-stats": (cmd_attn_stats, "3x3 decoder attention neighbourhood and causal share"),
    "ablate": (cmd_ablate, "run the ablation ladder and write its table"),
    "bench-cache": (cmd_bench_cache, "time cached vs uncached generation"),
    "export-codebook": (cmd_export_codebook, "write codebook vectors and usage as CSV"),
}


def build_parser():
    parser = _CliParser(prog="alitok", description="Aligned image tokenizer + AR generator pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_CliParser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", default=None, help="run config JSON (defaults to the desk preset)")
        p.add_argument("--seed", type=int, default=None, help="override every seed in the config")
        p.add_argument("--out", default=None, help="output directory (data dir for gen-data, PPM dir for sample)")
        p.add_argument("--data-dir", default=None, help="dataset directory (overrides paths.data_dir)")
        p.add_argument("--track", action="store_true", help="log params, metrics and artifacts to MLflow")
        if name == "train-tok":
            p.add_argument("--stage", type=int, choices=[1, 2], required=True, help="tokenizer training stage")
        elif name == "sample":
            p.add_argument("--class", dest="class_id", type=int, default=0, help="class id to condition on")
            p.add_argument("--n", type=int, default=1, help="number of images")
            p.add_argument("--temperature", type=float, default=None, help="softmax temperature")
            p.add_argument("--cfg-scale", type=float, default=None, help="guidance scale G (> 1 enables CFG)")
            p.add_argument("--scaler-power", type=float, default=None, help="pow-cosine schedule power p")
            p.add_argument("--no-kv-cache", action="store_true", help="recompute the full prefix every step")
        elif name == "eval-recon":
            p.add_argument("--n", type=int, default=8, help="number of side-by-side previews")
        elif name == "attn-stats":
            p.add_argument("--stage", type=int, choices=[1, 2], default=None, help="decoder to analyse")
            p.add_argument("--layers", default=None, help="comma-separated layer indices (default: final layer)")
            p.add_argument("--images", type=int, default=16, help="number of eval images")
            p.add_argument("--scope", choices=["all", "interior"], default="all", help="which grid tokens to average")
        elif name == "ablate":
            p.add_argument("--labels", default=None, help="comma-separated ablation labels (default A,B,C,D,F)")
            p.add_argument("--seeds", default=None, help="comma-separated seeds")
        elif name == "bench-cache":
            p.add_argument("--batch", type=int, default=8, help="samples generated per timing")
    return parser


def cli_dispatch(argv):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliUsageError as e:
        print(f"❌ {e}", file=sys.stderr)
        return 1
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    if getattr(args, "n", 1) < 1:
        print("❌ --n must be positive", file=sys.stderr)
        return 1

    handler = COMMANDS[args.command][0]
    try:
        cfg = _resolve(args)
        with tracked_run(args.track or cfg.tracking["enabled"], args.command,
                         cfg.tracking.get("tracking_uri"), cfg.tracking.get("experiment")):
            handler(args, cfg)
    except (AliTokError, OSError, ValueError) as e:
        print(f"❌ Critical Error in {args.command}: {e}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
