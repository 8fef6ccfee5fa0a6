"""Command line entry point: ``attredit <verb> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from .exceptions import (
    AttrEditError,
    ConditioningUnavailableError,
    MatcherUnavailableError,
    SchemaError,
    VQAUnavailableError,
)

EXIT_OK, EXIT_ERROR, EXIT_SCHEMA, EXIT_CLIENT, EXIT_PARTIAL = 0, 1, 2, 3, 4
CLIENT_ERRORS = (MatcherUnavailableError, VQAUnavailableError, ConditioningUnavailableError)

log = logging.getLogger("attredit")


def _images(directory) -> list[Path]:
    from .engines.training import IMAGE_SUFFIXES

    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# -- verbs ---------------------------------------------------------------------------

def cmd_attrs(args) -> int:
    from .taxonomy import list_attributes

    attrs = list_attributes(args.category)
    if args.json:
        print(json.dumps([a.to_dict() for a in attrs], indent=2))
        return EXIT_OK
    for a in attrs:
        print(f"{a.id:22s} {a.category.value:12s} {a.vqa_question or '-'}")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .manifest import validate_manifest

    m = validate_manifest(args.manifest)
    print(f"{m.name}: {len(m.subjects)} subjects x {len(m.attributes)} attributes x {len(m.methods)} methods "
          f"= {m.job_count()} edit jobs; x {len(m.matchers)} matchers = {m.job_count(True)} biometric jobs")
    if args.json:
        m.export_json(args.json)
    return EXIT_OK


def cmd_make_toy(args) -> int:
    from .toydata import make_toy_workspace

    path = make_toy_workspace(args.directory, n_subjects=args.subjects, methods=tuple(args.methods),
                              attributes=tuple(args.attributes))
    print(path)
    return EXIT_OK


def _train_config(args, **kw):
    from .engines import TrainConfig

    return TrainConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size, seed=args.seed, **kw)


def cmd_train_subject(args) -> int:
    from .engines import SubjectSet, build_regularization_set, finetune_global
    from .losses import LossWeights
    from .pipeline import make_backbone

    subject = SubjectSet.from_directory(args.images)
    subject.check_for_method(args.method)
    reg = None
    if args.reg:
        reg = build_regularization_set(args.reg, per_attribute=args.reg_per_attribute,
                                       require_all=not args.relaxed, exclude_ids=[p.stem for p in _images(args.images)])
    # without a regularization pool the prior term has nothing to train on
    lambda_p = 1.0 if reg is not None else 0.0
    lambda_s = 0.0 if args.method == "db_base" else args.lambda_s
    weights = LossWeights(lambda_p=lambda_p, lambda_s=lambda_s)
    backbone = make_backbone(args.backbone, args.seed)
    run = finetune_global(backbone, subject, reg, weights,
                          _train_config(args, rare_identifier=args.rare_identifier))
    out = Path(args.out)
    backbone.save(out, run.manifest())
    run.write_history(out / "history.jsonl")
    print(f"saved {out} (final loss {run.history[-1]['total']:.4f})")
    return EXIT_OK


def cmd_learn_token(args) -> int:
    from .engines import SubjectSet, learn_token_embedding
    from .pipeline import make_backbone

    subject = SubjectSet.from_directory(args.images)
    backbone = make_backbone(args.backbone, args.seed)
    cfg = _train_config(args, placeholder=args.placeholder, objective=args.objective)
    run = learn_token_embedding(backbone, subject, args.n_vectors, config=cfg)
    out = Path(args.out)
    run.embedding.save(out, run.manifest())
    run.write_history(out / "history.jsonl")
    print(f"saved {out} ({run.embedding.n_vectors} vectors)")
    return EXIT_OK


def _backbone_for(args):
    from .engines import TokenEmbedding, attach_embedding
    from .pipeline import _load_backbone, make_backbone

    backbone = _load_backbone(args.backbone, Path(args.model)) if args.model else make_backbone(args.backbone, args.seed)
    if args.token:
        attach_embedding(backbone, TokenEmbedding.load(args.token))
    return backbone


def cmd_edit_global(args) -> int:
    from .engines import generate_global
    from .taxonomy import PromptTemplate, build_edit_prompt, get_attribute
    from .toydata import save_png

    backbone = _backbone_for(args)
    prompt = args.prompt or build_edit_prompt(PromptTemplate(args.rare_identifier), get_attribute(args.attribute))
    img = generate_global(backbone, prompt, args.seed, args.steps, args.guidance)
    save_png(img, args.out)
    print(f"{prompt!r} -> {args.out}")
    return EXIT_OK


def cmd_edit_local(args) -> int:
    from .clients import HttpDepth, StubDepth
    from .engines import edit_local
    from .engines.training import load_image
    from .masks import RegionLibrary, canny_edge, depth_map, make_mask
    from .taxonomy import PromptTemplate, build_edit_prompt, get_attribute, load_taxonomy
    from .toydata import save_png

    backbone = _backbone_for(args)
    image_path = Path(args.image)
    img = load_image(image_path, getattr(backbone, "image_size", None))
    lib = RegionLibrary.from_directory(args.masks, load_taxonomy().region_vocabulary, [image_path.stem])
    attr = get_attribute(args.attribute) if args.attribute else None
    regions = args.regions.split(",") if args.regions else list(attr.regions if attr else [])
    if not regions:
        raise SchemaError("--regions", "no regions given and the attribute has none")
    mask = make_mask(lib, image_path.stem, regions)
    prompt = args.prompt
    if prompt is None:
        prompt = build_edit_prompt(PromptTemplate(args.rare_identifier), attr, require_identifier=False) if attr else ""
    if args.conditioning == "canny":
        cond = canny_edge(img, args.canny_low, args.canny_high, source_image_id=image_path.stem)
    else:
        cond = depth_map(img, StubDepth() if args.depth == "stub" else HttpDepth(), image_path.stem)
    res = edit_local(backbone, img, mask, prompt, cond, args.steps, args.guidance, args.controlnet_scale,
                     args.seed, composite=not args.latent_only, regions=regions)
    save_png(res.image, args.out)
    print(f"{prompt!r} on {regions} -> {args.out} ({res.blend_calls} blend steps)")
    return EXIT_OK


def _matcher(args):
    from .clients import HttpMatcher, StubMatcher

    return StubMatcher(args.matcher, seed=args.seed) if args.client == "stub" else HttpMatcher(args.matcher)


def cmd_eval_biometric(args) -> int:
    from . import biometrics as bio
    from .engines.training import load_image

    client = _matcher(args)

    def embed_tree(root, source):
        out = []
        for sub in sorted(p for p in Path(root).iterdir() if p.is_dir()):
            for img in _images(sub):
                out.append(bio.extract_embedding(client, load_image(img), sub.name, source, img.stem))
        return out

    gallery = embed_tree(args.gallery, "original_gallery")
    probes = embed_tree(args.probes, "probe_generated")
    scores = bio.compute_scores(gallery, probes, fusion=args.fusion)
    rates = bio.fnmr_at_fmr(scores, args.targets, failures=args.failures)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scores.save_csv(out / "scores.csv")
    bio.save_rates(rates, out / "rates")
    for r in rates.rows:
        flag = " (unresolvable)" if r.unresolvable else ""
        print(f"FMR {r.target:g}: threshold {r.threshold:.4f} FNMR {r.fnmr:.4f}{flag}")
    return EXIT_OK


def _vqa(args, answers=None):
    from .clients import HttpVQA, StubVQA

    if args.client == "http":
        return HttpVQA()
    return StubVQA(args.stub_mode if args.stub_mode in ("yes", "no") else "yes", answers=answers)


def cmd_audit(args) -> int:
    from .engines.training import load_image
    from .taxonomy import get_attribute
    from .vqa import audit_image, success_rate, write_records

    attr = get_attribute(args.attribute)
    client = _vqa(args)
    recs = [audit_image(client, load_image(p), attr, p.stem) for p in _images(args.images)]
    if args.out:
        write_records(recs, args.out, append=False)
    failed = sum(r.failure is not None for r in recs)
    rate = success_rate(recs, args.policy).rate(attr.id)
    print(f"{attr.display_name}: {rate if rate is None else f'{rate:.1f}'}% success over {len(recs)} images")
    if failed == len(recs):
        return EXIT_CLIENT
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_benchmark(args) -> int:
    from .engines.training import load_image
    from .vqa import (AnnotatedSet, benchmark_predictor, load_attribute_annotations,
                      stub_answers_from_annotations, write_records)

    labels = load_attribute_annotations(args.annotations)
    images = {p.stem: load_image(p) for p in _images(args.images) if p.stem in labels}
    annotated = AnnotatedSet(images, {k: labels[k] for k in images})
    attrs = args.attributes or None
    answers = None
    if args.client == "stub" and args.stub_mode in ("echo", "inverted"):
        answers = stub_answers_from_annotations(annotated, attrs, invert=args.stub_mode == "inverted")
    records: list = []
    table = benchmark_predictor(_vqa(args, answers), annotated, attrs, args.policy, records)
    if args.out:
        write_records(records, args.out, append=False)
    for aid, (n, correct, acc) in table.rows.items():
        print(f"{aid:22s} {correct:4d}/{n:<4d} {acc if acc is None else f'{acc:.1f}'}")
    print(f"mean accuracy {table.mean_accuracy:.1f}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .manifest import validate_manifest
    from .pipeline import run_experiment

    m = validate_manifest(args.manifest)
    if args.workers:
        m.workers = args.workers
    result = run_experiment(m, run_dir=args.out)
    summary = result.ledger.summary()
    print(f"{result.run_dir}: executed {result.executed} cells, {result.failed} failed")
    for kind, counts in summary.items():
        print(f"  {kind:8s} " + " ".join(f"{k}={v}" for k, v in counts.items()))
    if result.report is not None:
        print(f"report: {result.report.directory / 'report.md'}")
    return EXIT_PARTIAL if result.partial else EXIT_OK


def cmd_report(args) -> int:
    from .pipeline import RunLedger, record_report
    from .report import render_report

    ledger = RunLedger(Path(args.run_dir) / "ledger.jsonl")
    bundle = render_report(ledger, args.out)
    record_report(ledger, bundle)
    for f in bundle.files:
        print(f)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attredit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    a = sub.add_parser("attrs", help="list the attribute taxonomy")
    a.add_argument("action", choices=["list"])
    a.add_argument("--category", choices=["semantic", "demographic", "expression", "none"])
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_attrs)

    v = sub.add_parser("validate", help="check a manifest and print job counts")
    v.add_argument("manifest")
    v.add_argument("--json", help="also export the parsed manifest as JSON")
    v.set_defaults(func=cmd_validate)

    t = sub.add_parser("make-toy", help="write a synthetic workspace and manifest")
    t.add_argument("directory")
    t.add_argument("--subjects", type=int, default=2)
    t.add_argument("--methods", nargs="+", default=["cn_ip"])
    t.add_argument("--attributes", nargs="+", default=["blond_hair", "big_lips", "eyeglasses"])
    t.set_defaults(func=cmd_make_toy)

    def training(sp):
        sp.add_argument("--images", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--backbone", default="toy-v1")
        sp.add_argument("--steps", type=int, default=50)
        sp.add_argument("--lr", type=float, default=1e-3)
        sp.add_argument("--batch-size", type=int, default=4)
        sp.add_argument("--seed", type=int, default=0)

    ts = sub.add_parser("train-subject", help="DreamBooth-style fine-tuning on one subject")
    training(ts)
    ts.add_argument("--method", choices=["db_prop", "db_base"], default="db_prop")
    ts.add_argument("--reg", help="regularization root (one subdirectory per attribute)")
    ts.add_argument("--reg-per-attribute", type=int, default=30)
    ts.add_argument("--relaxed", action="store_true", help="allow a partial regularization set")
    ts.add_argument("--lambda-s", type=float, default=0.1)
    ts.add_argument("--rare-identifier", default="sks")
    ts.set_defaults(func=cmd_train_subject)

    lt = sub.add_parser("learn-token", help="textual inversion for a subject or attribute")
    training(lt)
    lt.set_defaults(lr=5e-3)
    lt.add_argument("--n-vectors", type=int, choices=[1, 2, 5], default=1)
    lt.add_argument("--placeholder", default="<sks>")
    lt.add_argument("--objective", choices=["ti", "mse"], default="ti")
    lt.set_defaults(func=cmd_learn_token)

    def generation(sp):
        sp.add_argument("--out", required=True)
        sp.add_argument("--backbone", default="toy-v1")
        sp.add_argument("--model", help="fine-tuned checkpoint directory")
        sp.add_argument("--token", help="learned token directory")
        sp.add_argument("--prompt")
        sp.add_argument("--rare-identifier", default="sks")
        sp.add_argument("--steps", type=int, default=50)
        sp.add_argument("--guidance", type=float, default=3.0)
        sp.add_argument("--seed", type=int, default=0)

    eg = sub.add_parser("edit-global", help="generate an edited portrait from a prompt")
    generation(eg)
    eg.add_argument("--attribute", default="no_attribute")
    eg.set_defaults(func=cmd_edit_global)

    el = sub.add_parser("edit-local", help="mask-guided inpainting of one image")
    generation(el)
    el.add_argument("--image", required=True)
    el.add_argument("--masks", required=True, help="directory of <image_id>_<region>.png masks")
    el.add_argument("--attribute")
    el.add_argument("--regions", help="comma-separated region names (overrides the attribute's)")
    el.add_argument("--conditioning", choices=["depth", "canny"], default="depth")
    el.add_argument("--depth", choices=["stub", "http"], default="stub")
    el.add_argument("--canny-low", type=float, default=0.05)
    el.add_argument("--canny-high", type=float, default=0.15)
    el.add_argument("--controlnet-scale", type=float, default=1.0)
    el.add_argument("--latent-only", action="store_true", help="skip the pixel-space composite")
    el.set_defaults(func=cmd_edit_local, rare_identifier="")

    eb = sub.add_parser("eval-biometric", help="FNMR at fixed FMR for gallery/probe folders")
    eb.add_argument("--gallery", required=True, help="one subdirectory of images per subject")
    eb.add_argument("--probes", required=True, help="same layout as --gallery")
    eb.add_argument("--matcher", default="arcface")
    eb.add_argument("--client", choices=["stub", "http"], default="stub")
    eb.add_argument("--targets", type=float, nargs="+", default=[1e-4, 1e-3])
    eb.add_argument("--failures", choices=["count", "exclude"], default="count")
    eb.add_argument("--fusion", choices=["pairwise", "max"], default="pairwise")
    eb.add_argument("--seed", type=int, default=0)
    eb.add_argument("--out", required=True)
    eb.set_defaults(func=cmd_eval_biometric)

    def vqa_opts(sp):
        sp.add_argument("--images", required=True)
        sp.add_argument("--client", choices=["stub", "http"], default="stub")
        sp.add_argument("--stub-mode", choices=["yes", "no", "echo", "inverted"], default="yes")
        sp.add_argument("--policy", choices=["failure", "exclude"], default="failure")
        sp.add_argument("--out", help="JSON-lines file for the raw answers")

    au = sub.add_parser("audit-attributes", help="VQA success rate for edited images")
    vqa_opts(au)
    au.add_argument("--attribute", required=True)
    au.set_defaults(func=cmd_audit)

    bv = sub.add_parser("benchmark-vqa", help="VQA accuracy against attribute annotations")
    vqa_opts(bv)
    bv.add_argument("--annotations", required=True)
    bv.add_argument("--attributes", nargs="+")
    bv.set_defaults(func=cmd_benchmark)

    r = sub.add_parser("run", help="execute or resume a manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="run directory (default: the manifest's output)")
    r.add_argument("--workers", type=int)
    r.set_defaults(func=cmd_run)

    rp = sub.add_parser("report", help="re-render tables and plots from a run ledger")
    rp.add_argument("run_dir")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore", UserWarning)
    try:
        return args.func(args)
    except SchemaError as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except CLIENT_ERRORS as exc:
        print(f"client failure: {exc}", file=sys.stderr)
        return EXIT_CLIENT
    except (AttrEditError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
