"""``ipc`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from safetensors.torch import load_file, save_file

from . import config as C
from .datasets import PRESET_NAMES, Manifest, build_manifest, list_images, load_eval_set, subsample
from .exceptions import ConfigError, IntegrityError, InputError, IPCError
from .runlog import MANIFEST_NAME, RunManifest, hash_inputs, sha256_file, sha256_tensor

logger = logging.getLogger("sdipc")

GRID_PAD = 2
QUIET = False


def _progress(msg: str) -> None:
    if not QUIET:
        print(msg, file=sys.stderr, flush=True)


# -- helpers -------------------------------------------------------------------

def load_pipeline(cfg: dict):
    from .converter import ConverterConfig
    from .pipeline import SDIPCPipeline

    clip_ck = C.resolve_checkpoint(cfg["clip"]["checkpoint"], "clip")
    sd_ck = C.resolve_checkpoint(cfg["sd"]["checkpoint"], "sd")
    conv = ConverterConfig(kappa=float(cfg["clip"]["kappa"]), threshold=float(cfg["clip"]["threshold"]))
    tiny = clip_ck.startswith("tiny"), sd_ck.startswith("tiny")
    if any(tiny) and not all(tiny):
        raise ConfigError("'tiny' models cannot be mixed with pretrained checkpoints")
    if all(tiny):
        if C.tiny_seed(clip_ck) != C.tiny_seed(sd_ck):
            raise ConfigError("tiny clip and sd seeds must match")
        return SDIPCPipeline.tiny(C.tiny_seed(clip_ck), conv)
    return SDIPCPipeline.from_pretrained(clip_ck, sd_ck, cfg["sd"]["device"], conv)


def sampler_config(cfg: dict, seed: int | None = None):
    from .diffusion import SamplerConfig

    s = cfg["sampler"]
    return SamplerConfig(int(s["steps"]), float(s["guidance"]), float(s["eta"]),
                         int(s["seed"] if seed is None else seed))


def make_grid(rows: list[list[np.ndarray]], pad: int = GRID_PAD) -> Image.Image:
    h, w = rows[0][0].shape[:2]
    n_cols = max(len(r) for r in rows)
    grid = np.full((len(rows) * (h + pad) - pad, n_cols * (w + pad) - pad, 3), 255, np.uint8)
    for i, row in enumerate(rows):
        for j, im in enumerate(row):
            grid[i * (h + pad) : i * (h + pad) + h, j * (w + pad) : j * (w + pad) + w] = im
    return Image.fromarray(grid)


def _apply_delta(pipe, path):
    if not path:
        return None
    from .tuner import TuningDelta, apply_delta

    delta = TuningDelta.load(path)
    apply_delta(pipe, delta)
    return sha256_file(Path(path) / "delta.safetensors")


def _save_latents(out: Path, latents: dict[str, torch.Tensor], run: RunManifest) -> None:
    path = out / "latents.safetensors"
    save_file({k: v.contiguous() for k, v in latents.items()}, path)
    for k, v in latents.items():
        run.latent_hashes[k] = sha256_tensor(v)
    run.outputs.append(str(path))


def _check_image(path: str) -> None:
    if not Path(path).is_file():
        raise InputError(f"image not found: {path}")


# -- commands -------------------------------------------------------------------
# Each handler takes (args: dict, cfg: dict, out: Path, run: RunManifest).

def cmd_convert(args, cfg, out, run):
    _check_image(args["image"])
    pipe = load_pipeline(cfg)
    run.model_tags = pipe.model_tags
    token = pipe.converted_token(args["image"])
    tensors = {"f_cnvrt": token.embedding.to(torch.float32).contiguous()}
    if args.get("dump_sequence"):
        seq = pipe.image_prompt(args["image"])
        tensors["sequence"] = seq.vectors.to(torch.float32).contiguous()
    target = Path(args["out"])
    save_file(tensors, target, metadata={"kappa": str(cfg["clip"]["kappa"]),
                                         "threshold": str(cfg["clip"]["threshold"])})
    run.add_output(target, token.embedding)
    _progress(f"wrote {target} ({', '.join(f'{k}{list(v.shape)}' for k, v in tensors.items())})")


def _save_sample(out, name, res, run, cfg, seed, **provenance) -> None:
    """PNG plus a JSON sidecar recording how the conditioning was built."""
    Image.fromarray(res.image).save(out / f"{name}.png")
    s = cfg["sampler"]
    side = {**provenance, "seed": seed, "steps": s["steps"], "guidance": s["guidance"], "eta": s["eta"]}
    (out / f"{name}.json").write_text(json.dumps(side, indent=2))
    run.outputs += [str(out / f"{name}.png"), str(out / f"{name}.json")]


def cmd_variate(args, cfg, out, run):
    from .pipeline import derive_seed

    for p in args["image"]:
        _check_image(p)
    pipe = load_pipeline(cfg)
    run.model_tags = pipe.model_tags
    if args.get("delta"):
        run.log("delta", path=args["delta"], sha256=_apply_delta(pipe, args["delta"]))
    base, n = int(cfg["sampler"]["seed"]), int(args["n"])
    rows, latents = [], {}
    total = len(args["image"]) * n
    for j, image in enumerate(args["image"]):
        cond = pipe.image_prompt(image)
        image_seed = base if len(args["image"]) == 1 else derive_seed(base, j)
        row = []
        for i in range(n):
            seed = derive_seed(image_seed, i)
            run.seeds.append(seed)
            res = pipe.generate(cond, sampler_config(cfg, seed))
            name = f"sample_{j:02d}_{i:02d}"
            _save_sample(out, name, res, run, cfg, seed, cond="image", image=str(image),
                         delta=args.get("delta"))
            latents[name] = res.latents
            row.append(res.image)
            _progress(f"[{j * n + i + 1}/{total}] {name}")
            run.log("sample", name=name, seed=seed)
        rows.append(row)
    make_grid(rows).save(out / "grid.png")
    run.outputs.append(str(out / "grid.png"))
    _save_latents(out, latents, run)


def parse_alphas(args) -> list[float]:
    if args.get("alpha_sweep"):
        try:
            return [float(a) for a in str(args["alpha_sweep"]).split(",")]
        except ValueError as exc:
            raise InputError(f"bad --alpha-sweep {args['alpha_sweep']!r}") from exc
    return [float(args.get("alpha", 0.9))]


def cmd_edit(args, cfg, out, run):
    from .pipeline import derive_seed

    _check_image(args["image"])
    if not args.get("text") or not args["text"].strip():
        raise InputError("edit text must be non-empty")
    alphas = parse_alphas(args)
    for a in alphas:
        if not np.isfinite(a) or a < 0:
            raise InputError(f"alpha must be >= 0, got {a}")
    pipe = load_pipeline(cfg)
    run.model_tags = pipe.model_tags
    if args.get("delta"):
        run.log("delta", path=args["delta"], sha256=_apply_delta(pipe, args["delta"]))
    base, n = int(cfg["sampler"]["seed"]), int(args.get("n", 1))
    token = pipe.converted_token(args["image"])
    text = pipe.clip.encode_text(args["text"])
    from .converter import combine_edit

    columns, latents = [], {}
    for a in alphas:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            cond = combine_edit(token, text, a)
        col = []
        for i in range(n):
            seed = derive_seed(base, i)
            run.seeds.append(seed)
            res = pipe.generate(cond, sampler_config(cfg, seed))
            name = f"edit_a{a:.2f}_{i:02d}"
            _save_sample(out, name, res, run, cfg, seed, cond="edit", image=str(args["image"]),
                         text=args["text"], alpha=a, delta=args.get("delta"))
            latents[name] = res.latents
            col.append(res.image)
            _progress(f"alpha={a:.2f} sample {i + 1}/{n}")
            run.log("sample", name=name, seed=seed, alpha=a)
        columns.append(col)
    rows = [[columns[c][r] for c in range(len(alphas))] for r in range(n)]
    make_grid(rows).save(out / "strip.png")
    run.outputs.append(str(out / "strip.png"))
    _save_latents(out, latents, run)


def cmd_mask_probe(args, cfg, out, run):
    from .mask_probe import TokenMask, export_attention_grid, generate_masked

    if not args.get("text"):
        raise InputError("probe text must be non-empty")
    groups = list(dict.fromkeys(g for part in args.get("keep") or [["sos", "eos"]] for g in part))
    if args.get("keep_pads") and "pads" not in groups:
        groups.append("pads")
    pipe = load_pipeline(cfg)
    run.model_tags = pipe.model_tags
    enc = pipe.clip.encode_text(args["text"])
    mask = TokenMask.from_groups(enc, groups)
    scfg = sampler_config(cfg)
    run.seeds.append(scfg.seed)
    res = generate_masked(pipe.backend, enc, mask, scfg, args.get("map_resolution"))
    Image.fromarray(res.image).save(out / "masked.png")
    shown = enc.eos_index + 1
    export_attention_grid(res.maps[:shown], out / "attention.png")
    latents = {"masked": res.latents}
    if args.get("compare"):
        full = pipe.generate(pipe.text_prompt(args["text"]), scfg)
        Image.fromarray(full.image).save(out / "unmasked.png")
        latents["unmasked"] = full.latents
    info = {
        "text": args["text"], "kept_groups": groups, "kept_positions": mask.keep.nonzero().flatten().tolist(),
        "eos_index": enc.eos_index, "max_masked_prob": res.max_masked_prob,
        "max_row_sum_error": res.max_row_sum_error, "layers": res.layers,
        "token_mass": res.token_mass[:shown].tolist(),
    }
    (out / "probe.json").write_text(json.dumps(info, indent=2))
    run.outputs += [str(out / p) for p in ("masked.png", "attention.png", "probe.json")]
    _save_latents(out, latents, run)
    _progress(f"max attention on masked tokens: {res.max_masked_prob:.3g}")


def tuning_config(cfg: dict, mode: str, preset: str | None):
    from .tuner import TuningConfig

    t = {k: v for k, v in cfg["tuning"].items() if v is not None}
    if mode == "ct":
        t.pop("use_text_regularizer", None)
        t.pop("ab_training", None)
        return TuningConfig.for_customization(**t)
    return TuningConfig.for_preset(preset, mode=mode, **t)


def _write_tuning(out: Path, result, run: RunManifest) -> None:
    result.delta.save(out / "delta")
    (out / "history.json").write_text(json.dumps(result.history, indent=2))
    run.outputs += [str(out / "delta"), str(out / "history.json")]
    if result.fc_matrix is not None:
        save_file({"fc": result.fc_matrix.contiguous()}, out / "fc.safetensors")
        run.outputs.append(str(out / "fc.safetensors"))


def cmd_finetune(args, cfg, out, run):
    from .tuner import check_preset, train_fc_ablation, train_ft

    preset = args["preset"]
    mode = "fc_ablation" if args.get("fc_ablation") else "ft"
    tcfg = tuning_config(cfg, mode, preset)
    plan = {"preset": preset, "mode": mode, "epochs": tcfg.epochs_or_iters,
            "learning_rate": tcfg.learning_rate, "schedule": tcfg.schedule,
            "use_text_regularizer": tcfg.use_text_regularizer, "ab_training": tcfg.ab_training}
    manifest = None
    if args.get("manifest"):
        manifest = Manifest.load(args["manifest"], preset, tcfg.seed)
    elif args.get("data_root"):
        manifest = build_manifest(preset, args["data_root"], tcfg.seed)
        manifest.save(out / "train_manifest.jsonl")
    elif not args.get("dry_run"):
        raise ConfigError("finetune needs --manifest FILE or --data-root DIR")
    if manifest is not None:
        check_preset(manifest, preset)
        plan["n_images"] = len(manifest)
        plan["manifest_sha256"] = manifest.digest()
    run.log("plan", **plan)
    print(json.dumps(plan))
    if args.get("dry_run"):
        return
    pipe = load_pipeline(cfg)
    run.model_tags = pipe.model_tags
    run.seeds.append(tcfg.seed)
    train = train_fc_ablation if mode == "fc_ablation" else train_ft
    result = train(pipe, manifest, tcfg, preset,
                   callback=lambda r: _progress(f"epoch {r['epoch']}/{tcfg.epochs_or_iters} loss {r['loss']:.4f}"))
    _write_tuning(out, result, run)


def cmd_customize(args, cfg, out, run):
    from .tuner import train_ct

    refs_dir = Path(args["refs"])
    if not refs_dir.is_dir():
        raise InputError(f"reference directory not found: {refs_dir}")
    refs = [str(p) for p in list_images(refs_dir)]
    if not refs:
        raise InputError(f"no images in {refs_dir}")
    if args.get("iters") is not None:
        cfg["tuning"]["epochs_or_iters"] = int(args["iters"])
    tcfg = tuning_config(cfg, "ct", None)
    run.log("plan", iterations=tcfg.epochs_or_iters, learning_rate=tcfg.learning_rate, n_refs=len(refs))
    pipe = load_pipeline(cfg)
    run.model_tags = pipe.model_tags
    run.seeds.append(tcfg.seed)
    result = train_ct(pipe, refs, tcfg,
                      callback=lambda r: _progress(f"iter {r['iter']}/{tcfg.epochs_or_iters} loss {r['loss']:.4f}"))
    _write_tuning(out, result, run)


def cmd_eval_tspace(args, cfg, out, run):
    from .evaluator import eval_space_classification, eval_space_retrieval

    e = cfg["eval"]
    root = args.get("data_root") or e["data_root"]
    if not root:
        raise ConfigError("eval tspace needs --data-root or eval.data_root")
    name = {"imagenet-val": "imagenet_val", "coco": "coco_val_5k"}[args["dataset"]]
    data = load_eval_set(name, root, allow_partial=bool(e["allow_partial"]))
    if e["subsample"]:
        data = subsample(data, int(e["subsample"]), int(e["seed"]))
    run.seeds.append(int(e["seed"]))
    pipe = load_pipeline(cfg)
    run.model_tags = pipe.model_tags
    proto = {"subsample": e["subsample"], "subsample_seed": e["seed"], "threshold": cfg["clip"]["threshold"],
             "model_tags": pipe.model_tags}
    if name == "imagenet_val":
        reports = eval_space_classification(pipe.clip, pipe.inverse, data, template=e["template"],
                                             batch_size=int(e["batch_size"]), protocol=proto)
    else:
        reports = eval_space_retrieval(pipe.clip, pipe.inverse, data, batch_size=int(e["batch_size"]),
                                       protocol=proto)
    _write_reports(out, reports, run)


def _read_captions(path) -> list[str]:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        return [line.strip() for line in text.splitlines() if line.strip()]
    if not isinstance(data, list) or not all(isinstance(c, str) for c in data):
        raise InputError(f"{path}: expected a JSON list of strings or one caption per line")
    return data


def cmd_eval_gen(args, cfg, out, run):
    from .evaluator import EvalReport, eval_clip_score, eval_fid, read_image_dir

    gen, _ = read_image_dir(args["generated"])
    ref, _ = read_image_dir(args["reference"])
    metrics, proto = {}, {}
    if not args.get("skip_fid"):
        fid = eval_fid(args["generated"], args["reference"])
        metrics.update(fid.metrics)
        proto.update(fid.protocol)
    pipe = load_pipeline(cfg)
    run.model_tags = pipe.model_tags
    bs = int(cfg["eval"]["batch_size"])
    if len(gen) != len(ref):
        raise InputError(f"{len(gen)} generated vs {len(ref)} reference images; CLIP-score pairs them by name order")
    metrics["clip_score_img"] = eval_clip_score(pipe.clip, gen, ref, "image", bs)
    if args.get("captions"):
        caps = _read_captions(args["captions"])
        metrics["clip_score_txt"] = eval_clip_score(pipe.clip, gen, caps, "text", bs)
    proto.update({"pairing": "sorted file names", "anchor_for_comparison": "image", "model_tags": pipe.model_tags})
    _write_reports(out, {"gen": EvalReport(metrics, proto)}, run)


def _write_reports(out: Path, reports: dict, run: RunManifest) -> None:
    payload = {k: json.loads(r.to_json()) for k, r in reports.items()}
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    run.outputs.append(str(out / "report.json"))
    for k, r in reports.items():
        print(f"[{k}]\n{r.table()}")


HANDLERS = {
    "convert": cmd_convert,
    "variate": cmd_variate,
    "edit": cmd_edit,
    "mask-probe": cmd_mask_probe,
    "finetune": cmd_finetune,
    "customize": cmd_customize,
    "eval tspace": cmd_eval_tspace,
    "eval gen": cmd_eval_gen,
}

INPUT_KEYS = ("image", "refs", "manifest", "data_root", "delta", "generated", "reference", "captions")


def execute(command: str, args: dict, cfg: dict, sources: dict, out: Path) -> RunManifest:
    """Run one command with a fully resolved config, recording a manifest."""
    if command == "convert":
        target = Path(args["out"])
        target.parent.mkdir(parents=True, exist_ok=True)
        out, name = target.parent, f"{target.name}.run.json"
    else:
        out, name = Path(out), MANIFEST_NAME
    inputs = []
    for key in INPUT_KEYS:
        v = args.get(key)
        inputs += v if isinstance(v, list) else ([v] if v else [])
    run = RunManifest.create(
        out, name=name, command=command, args=args, config=cfg, config_sources=sources,
        input_hashes=hash_inputs(inputs),
    )
    try:
        HANDLERS[command](args, cfg, out, run)
    except KeyboardInterrupt:
        run.finish("incomplete")
        raise
    except Exception as exc:
        run.log("error", message=str(exc), type=type(exc).__name__)
        run.finish("failed")
        raise
    run.finish("complete")
    return run


def rerun(manifest_path, out) -> tuple[RunManifest, dict]:
    """Re-execute a recorded run into `out`; returns the new run and a latent comparison."""
    old = RunManifest.load(manifest_path)
    if old.command not in HANDLERS:
        raise ConfigError(f"manifest records unknown command {old.command!r}")
    current = hash_inputs(old.input_hashes)
    changed = sorted(p for p, h in old.input_hashes.items() if current.get(p) != h)
    if changed:
        raise IntegrityError(f"inputs changed since the recorded run: {changed[:5]}")
    args = dict(old.args)
    if old.command == "convert":
        args["out"] = str(Path(out) / Path(args["out"]).name)
    new = execute(old.command, args, old.config, {k: "manifest" for k in old.config_sources}, Path(out))
    cmp = {k: old.latent_hashes.get(k) == v for k, v in new.latent_hashes.items()}
    cmp["all_identical"] = bool(cmp) and all(cmp.values()) and new.latent_hashes.keys() == old.latent_hashes.keys()
    return new, cmp


# -- argument parsing ---------------------------------------------------------------

def _common(p: argparse.ArgumentParser, sampler: bool = False) -> None:
    p.add_argument("--config", help="JSON config file with sections clip/sd/sampler/tuning/eval")
    p.add_argument("--clip", dest="clip_checkpoint", help="CLIP checkpoint dir, or 'tiny'")
    p.add_argument("--sd", dest="sd_checkpoint", help="diffusion checkpoint dir, or 'tiny'")
    p.add_argument("--threshold", type=float, help="singular-value cutoff for the pseudo-inverse")
    p.add_argument("--kappa", type=float, help="norm of the converted token")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")
    if sampler:
        p.add_argument("--steps", type=int)
        p.add_argument("--guidance", type=float)
        p.add_argument("--eta", type=float)
        p.add_argument("--seed", type=int, help="base seed; sample i uses a seed derived from (seed, i)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ipc", description="Image-to-prompt conversion for latent diffusion.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert an image into a prompt embedding")
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output .safetensors file")
    p.add_argument("--dump-sequence", action="store_true", help="also store the 77-slot sequence")

    p = sub.add_parser("variate", help="generate variations of one or more images")
    _common(p, sampler=True)
    p.add_argument("--image", required=True, nargs="+")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--delta", help="tuning delta directory to apply first")
    p.add_argument("--out", required=True)

    p = sub.add_parser("edit", help="edit an image with a text prompt")
    _common(p, sampler=True)
    p.add_argument("--image", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--alpha", type=float, default=0.9)
    p.add_argument("--alpha-sweep", help="comma-separated alphas, e.g. 0,0.3,0.6,0.9")
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--delta")
    p.add_argument("--out", required=True)

    p = sub.add_parser("mask-probe", help="generate with word tokens hidden from cross-attention")
    _common(p, sampler=True)
    p.add_argument("--text", "--prompt", dest="text", required=True)
    p.add_argument("--keep", nargs="+", type=_keep_groups, default=[["sos", "eos"]],
                   help="token groups to keep: sos, words, eos, pads (space or comma separated)")
    p.add_argument("--keep-pads", action="store_true")
    p.add_argument("--map-resolution", type=int)
    p.add_argument("--compare", action="store_true", help="also generate without masking")
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune", help="parameter-efficient fine-tuning on a preset")
    _common(p)
    p.add_argument("--preset", required=True, choices=PRESET_NAMES)
    p.add_argument("--manifest", help="JSON-lines training manifest")
    p.add_argument("--data-root", help="dataset root to build the manifest from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--prompt-tokens", type=int)
    p.add_argument("--ab", action="store_true", default=None, help="A/B training")
    p.add_argument("--no-text-reg", action="store_true", default=None)
    p.add_argument("--fc-ablation", action="store_true", help="learn an affine map instead of the inverse")
    p.add_argument("--tuning-seed", type=int)
    p.add_argument("--dry-run", action="store_true", help="validate and print the schedule only")
    p.add_argument("--out", required=True)

    p = sub.add_parser("customize", help="fast customization on a few reference images")
    _common(p)
    p.add_argument("--refs", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--prompt-tokens", type=int)
    p.add_argument("--tuning-seed", type=int)
    p.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="evaluation protocols").add_subparsers(dest="eval_command", required=True)
    p = ev.add_parser("tspace", help="C-space vs T-space classification / retrieval")
    _common(p)
    p.add_argument("--dataset", required=True, choices=("imagenet-val", "coco"))
    p.add_argument("--data-root")
    p.add_argument("--subsample", type=int)
    p.add_argument("--seed", type=int, dest="eval_seed")
    p.add_argument("--template")
    p.add_argument("--allow-partial", action="store_true", default=None)
    p.add_argument("--out", required=True)
    p = ev.add_parser("gen", help="FID and CLIP-score of generated images")
    _common(p)
    p.add_argument("--generated", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--captions")
    p.add_argument("--skip-fid", action="store_true")
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerun", help="re-execute a run from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("-q", "--quiet", action="store_true")
    return parser


def _keep_groups(value: str) -> list[str]:
    groups = [g for g in value.split(",") if g]
    bad = [g for g in groups if g not in KEEP_GROUPS]
    if bad or not groups:
        raise argparse.ArgumentTypeError(f"invalid group {value!r}; choose from {', '.join(KEEP_GROUPS)}")
    return groups


KEEP_GROUPS = ("sos", "words", "eos", "pads")

CONFIG_FLAGS = {
    "clip_checkpoint": ("clip", "checkpoint"), "sd_checkpoint": ("sd", "checkpoint"),
    "threshold": ("clip", "threshold"), "kappa": ("clip", "kappa"),
    "steps": ("sampler", "steps"), "guidance": ("sampler", "guidance"),
    "eta": ("sampler", "eta"), "seed": ("sampler", "seed"),
    "epochs": ("tuning", "epochs_or_iters"), "lr": ("tuning", "learning_rate"),
    "batch_size": ("tuning", "batch_size"), "prompt_tokens": ("tuning", "deep_prompt_tokens_per_layer"),
    "ab": ("tuning", "ab_training"), "tuning_seed": ("tuning", "seed"),
    "subsample": ("eval", "subsample"), "eval_seed": ("eval", "seed"), "template": ("eval", "template"),
    "allow_partial": ("eval", "allow_partial"),
}
SKIP = {"command", "eval_command", "config", "verbose", "quiet", "no_text_reg"}


def split_args(ns: argparse.Namespace) -> tuple[str, dict, dict]:
    """Namespace -> (command, command args, config overrides)."""
    command = ns.command if ns.command != "eval" else f"eval {ns.eval_command}"
    overrides: dict = {}
    args = {}
    for key, value in vars(ns).items():
        if key in CONFIG_FLAGS:
            section, name = CONFIG_FLAGS[key]
            overrides.setdefault(section, {})[name] = value
        elif key not in SKIP:
            args[key] = value
    if getattr(ns, "no_text_reg", None):
        overrides.setdefault("tuning", {})["use_text_regularizer"] = False
    if command == "eval tspace" and ns.data_root:
        overrides.setdefault("eval", {})["data_root"] = ns.data_root
    return command, args, overrides


def main(argv=None) -> int:
    global QUIET
    parser = build_parser()
    ns = parser.parse_args(argv)
    QUIET = bool(ns.quiet)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.command == "rerun":
            new, cmp = rerun(ns.manifest, Path(ns.out))
            print(json.dumps({"manifest": str(new.path), "latents": cmp}, indent=2))
            return 0 if cmp.get("all_identical", True) or not new.latent_hashes else 3
        command, args, overrides = split_args(ns)
        file_cfg = C.load_file(ns.config) if ns.config else None
        cfg, sources = C.resolve(file_cfg, overrides)
        # config problems surface here, before any model is loaded
        if not args.get("dry_run"):
            C.resolve_checkpoint(cfg["clip"]["checkpoint"], "clip")
            C.resolve_checkpoint(cfg["sd"]["checkpoint"], "sd")
        execute(command, args, cfg, sources, Path(args.get("out", ".")))
        return 0
    except (ConfigError, InputError) as exc:
        print(f"ipc: error: {exc}", file=sys.stderr)
        return 2
    except IPCError as exc:
        print(f"ipc: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("ipc: interrupted; partial outputs kept, manifest marked incomplete", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
