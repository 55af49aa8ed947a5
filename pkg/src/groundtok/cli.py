"""Command-line entry point.

Subcommands: pipeline, parse, render, template, eval, bench-build,
instruct (filter | prompt | generate | validate), selftest. Every command
is deterministic given (inputs, config, seed); timestamps appear only in
manifest.json.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__, benchmark, evalprotocols, figures, grammar, instruct, pipeline
from .config import build_manifest, load_config, write_manifest
from .regions import ProxyRegistry
from .serialization import dump_json, dump_jsonl, load_jsonl
from .selftest import CORRUPTIONS, run_selftest


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="flat key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="root seed (default 0)")


def _config_from_args(args: argparse.Namespace, extra: dict | None = None):
    overrides = dict(extra or {})
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _cmd_pipeline(args: argparse.Namespace) -> int:
    extra = {}
    if args.no_merge:
        extra["merge"] = False
    cfg = _config_from_args(args, extra)

    fixture = pipeline.load_fixture(args.fixture)
    result = pipeline.run_pipeline(
        cfg,
        fixture["image"],
        image_id=fixture["image_id"],
        gt_boxes=fixture["gt_boxes"],
        user_boxes=fixture["user_boxes"],
        instruction=args.instruction,
        grounding=not args.no_grounding,
    )
    out_dir = args.out
    written = pipeline.save_pipeline_outputs(result, out_dir, save_tokens=args.save_tokens)
    manifest = build_manifest("pipeline", cfg.to_dict(), {"fixture": args.fixture})
    write_manifest(manifest, out_dir)

    print(json.dumps(result.summary, sort_keys=True, indent=2))
    print(f"wrote {', '.join(str(p) for p in written.values())}", file=sys.stderr)
    return 0


def _try_read_coco(path: Path) -> dict | None:
    """A COCO annotation file is one JSON object with the three sections;
    anything else (e.g. a JSON Lines items file) returns None."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError:
        return None
    if isinstance(doc, dict) and {"images", "annotations", "categories"} <= set(doc):
        return doc
    return None


def _load_registry_arg(args: argparse.Namespace) -> ProxyRegistry | int:
    if args.registry is not None:
        return ProxyRegistry.load(args.registry)
    return args.registry_size


def _cmd_parse(args: argparse.Namespace) -> int:
    text = Path(args.text).read_text(encoding="utf-8") if args.from_file else args.text
    registry = _load_registry_arg(args)
    if args.kind == "prompt":
        size, grounding, instruction = grammar.parse_prompt(text)
        print(json.dumps({"registry_size": size, "grounding": grounding, "instruction": instruction}, sort_keys=True))
        return 0
    response = grammar.parse(text, registry, lenient=args.lenient)
    segments = []
    for seg in response.segments:
        if isinstance(seg, str):
            segments.append({"text": seg})
        else:
            segments.append({"phrase": seg.phrase, "referents": list(seg.referents)})
    print(json.dumps({"segments": segments}, sort_keys=True))
    return 0


def _cmd_render(args: argparse.Namespace) -> int:
    registry = _load_registry_arg(args)
    if args.response is not None:
        with open(args.response, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        segments = []
        for seg in doc["segments"]:
            if "text" in seg:
                segments.append(seg["text"])
            else:
                segments.append(grammar.GroundedSpan(seg["phrase"], tuple(seg["referents"])))
        print(grammar.serialize(grammar.GroundedResponse(tuple(segments)), registry))
        return 0
    print(grammar.render_prompt(registry, args.instruction, args.grounding))
    return 0


def _cmd_template(args: argparse.Namespace) -> int:
    template_args = {}
    for pair in args.arg:
        if "=" not in pair:
            raise ValueError(f"--arg expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        template_args[key] = value
    print(grammar.apply_template(args.task, template_args, seed=args.seed if args.seed is not None else 0))
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    predictions = benchmark.read_predictions(args.predictions)

    annotations = Path(args.annotations)
    coco_doc = _try_read_coco(annotations)
    if coco_doc is not None:
        dataset = benchmark.AnnotatedDataset.from_coco_dict(coco_doc)
        keys = sorted(predictions)
        items = benchmark.items_from_coco_for_predictions(dataset, keys)
    else:  # benchmark items file (JSON Lines)
        items = benchmark.read_items(annotations)
    preds = benchmark.join_predictions(items, predictions)

    matching = "optimal" if args.optimal_match else "greedy"
    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            records = list(
                pool.map(
                    lambda pair: evalprotocols.evaluate_item(pair[0], pair[1], args.protocol, matching),
                    zip(items, preds),
                )
            )
    else:
        records = [evalprotocols.evaluate_item(it, p, args.protocol, matching) for it, p in zip(items, preds)]
    report = evalprotocols.aggregate_report(records, args.protocol)
    if args.rec:
        report.acc_at_50 = evalprotocols.rec_accuracy(items, preds)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_json(report.to_json_dict(), out_dir / "report.json")
    (out_dir / "metrics.txt").write_text(report.metrics_block(), encoding="utf-8")
    if not args.no_figures:
        figures.save_report_figures(report, out_dir)
    manifest = build_manifest(
        "eval",
        {"protocol": args.protocol, "rec": args.rec, "matching": matching, "jobs": args.jobs},
        {"annotations": annotations, "predictions": args.predictions},
    )
    write_manifest(manifest, out_dir)

    print(report.metrics_block(), end="")
    return 0


def _cmd_bench_build(args: argparse.Namespace) -> int:
    dataset = benchmark.AnnotatedDataset.from_coco_json(args.annotations)
    spec = benchmark.BenchmarkSpec(
        categories=tuple(args.category) if args.category else None,
        max_images_per_category=args.max_images,
        seed=args.seed if args.seed is not None else 0,
    )
    items = benchmark.build_benchmark(dataset, spec)
    benchmark.write_items(items, args.out)
    categories = {it.query for it in items}
    images = {it.image_id for it in items}
    mean_gt = sum(len(it.gt_boxes) for it in items) / len(items) if items else 0.0
    print(
        json.dumps(
            {
                "items": len(items),
                "categories": len(categories),
                "images": len(images),
                "mean_gt_per_item": round(mean_gt, 4),
            },
            sort_keys=True,
        )
    )
    return 0


def _instruct_inputs(args: argparse.Namespace):
    with open(args.regions, "r", encoding="utf-8") as fh:
        annotated = instruct.load_region_annotations(json.load(fh))
    context = {}
    if args.context:
        with open(args.context, "r", encoding="utf-8") as fh:
            context = {str(k): v for k, v in json.load(fh).items()}
    return annotated, context


def _cmd_instruct_filter(args: argparse.Namespace) -> int:
    annotated, _ = _instruct_inputs(args)
    rows = []
    for image_id, regions in annotated:
        filtered = instruct.filter_overlaps(regions, args.iou_thresh, args.max_regions)
        rows.append(
            {
                "image_id": image_id,
                "kept": [
                    {"box": r.box.to_list(), "description": r.description} for r in filtered.regions
                ],
                "truncated": filtered.truncated,
                "sparse": filtered.sparse,
            }
        )
    dump_jsonl(rows, args.out)
    print(f"filtered {len(rows)} images -> {args.out}")
    return 0


def _cmd_instruct_prompt(args: argparse.Namespace) -> int:
    annotated, context = _instruct_inputs(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for image_id, regions in annotated:
        filtered = instruct.filter_overlaps(regions, args.iou_thresh, args.max_regions)
        if filtered.sparse:
            continue
        spec = instruct.place_markers(filtered.regions, image_id)
        request = instruct.assemble_request(
            spec,
            {
                "region_descriptions": {m.label: filtered.regions[m.label - 1].description for m in spec.markers},
                "image_descriptions": context.get(image_id, {}).get("captions", ()),
                "qa_pairs": [(qa["question"], qa["answer"]) for qa in context.get(image_id, {}).get("qa", [])],
            },
            seed=args.seed if args.seed is not None else 0,
        )
        (out_dir / f"{image_id}.prompt.txt").write_text(request.render_text(), encoding="utf-8")
        if args.render_markers:
            image_size = (args.image_size, args.image_size)
            figures.render_marked_image(spec, image_size, out_dir / f"{image_id}.marked.png")
        count += 1
    print(f"wrote {count} request documents to {out_dir}")
    return 0


def _cmd_instruct_generate(args: argparse.Namespace) -> int:
    annotated, context = _instruct_inputs(args)
    client = instruct.MockVlmClient() if args.mock else instruct.HttpVlmClient.from_env()
    result = instruct.generate_conversations(
        annotated,
        client,
        context_by_image=context,
        iou_threshold=args.iou_thresh,
        max_regions=args.max_regions,
        seed=args.seed if args.seed is not None else 0,
    )
    dump_jsonl([r.to_json_dict() for r in result.records], args.out)
    accepted = sum(1 for r in result.records if r.valid)
    print(
        json.dumps(
            {
                "records": len(result.records),
                "accepted": accepted,
                "rejected": len(result.records) - accepted,
                "skipped_sparse": len(result.skipped_sparse),
            },
            sort_keys=True,
        )
    )
    return 0


def _cmd_instruct_validate(args: argparse.Namespace) -> int:
    rows = load_jsonl(args.records)
    bad = 0
    for lineno, row in enumerate(rows, start=1):
        labels = row.get("referenced_labels", [])
        size = max(labels) if labels else 0
        try:
            for turn in row["turns"]:
                grammar.parse(turn["text"], max(size, args.registry_size), lenient=True)
        except grammar.MarkupError as exc:
            bad += 1
            print(f"{args.records}:{lineno}: {exc}", file=sys.stderr)
    print(json.dumps({"records": len(rows), "invalid": bad}, sort_keys=True))
    return 0 if bad == 0 else 1


def _cmd_selftest(args: argparse.Namespace) -> int:
    ok = run_selftest(corrupt=args.corrupt)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groundtok", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pipeline", help="run the tokenization pipeline on a fixture")
    _add_config_flags(p)
    p.add_argument("--fixture", type=Path, required=True, help="fixture JSON (image spec + boxes)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--instruction", default=pipeline.DEFAULT_INSTRUCTION)
    p.add_argument("--no-grounding", action="store_true")
    p.add_argument("--no-merge", action="store_true", help="skip the 2x2 token merge (1024 image tokens)")
    p.add_argument("--save-tokens", action="store_true", help="also write the projected image tokens")
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("parse", help="parse grounded markup or a prompt")
    p.add_argument("text")
    p.add_argument("--from-file", action="store_true", help="treat TEXT as a file path")
    p.add_argument("--kind", choices=("response", "prompt"), default="response")
    p.add_argument("--registry", type=Path, default=None, help="registry JSON to validate referents against")
    p.add_argument("--registry-size", type=int, default=1_000_000)
    p.add_argument("--lenient", action="store_true")
    p.set_defaults(func=_cmd_parse)

    p = sub.add_parser("render", help="render a prompt or serialize a response")
    p.add_argument("--registry", type=Path, default=None)
    p.add_argument("--registry-size", type=int, default=0)
    p.add_argument("--instruction", default=pipeline.DEFAULT_INSTRUCTION)
    p.add_argument("--grounding", action="store_true")
    p.add_argument("--response", type=Path, default=None, help="segments JSON to serialize instead")
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("template", help="instantiate a task instruction template")
    p.add_argument("--task", required=True, choices=sorted(grammar.TEMPLATES))
    p.add_argument("--arg", action="append", default=[], help="placeholder as key=value; repeatable")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_template)

    p = sub.add_parser("eval", help="evaluate predictions under a recall protocol")
    p.add_argument("--protocol", choices=evalprotocols.PROTOCOLS, default="as_many")
    p.add_argument("--annotations", type=Path, required=True, help="COCO JSON or benchmark items JSONL")
    p.add_argument("--predictions", type=Path, required=True, help="predictions JSONL")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--rec", action="store_true", help="also compute REC Acc@0.5 (single-GT items)")
    p.add_argument("--optimal-match", action="store_true", help="maximum matching instead of greedy")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench-build", help="build a grounding benchmark from COCO-style annotations")
    p.add_argument("--annotations", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--max-images", type=int, default=5)
    p.add_argument("--category", type=int, action="append", default=None, help="restrict to category id; repeatable")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_bench_build)

    p = sub.add_parser("instruct", help="grounded conversation dataset construction")
    isub = p.add_subparsers(dest="subcommand", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--regions", type=Path, required=True, help="VG-style region annotation JSON")
    common.add_argument("--context", type=Path, default=None, help="captions/QA JSON keyed by image id")
    common.add_argument("--iou-thresh", type=float, default=instruct.DEFAULT_IOU_THRESHOLD)
    common.add_argument("--max-regions", type=int, default=instruct.DEFAULT_MAX_REGIONS)
    common.add_argument("--seed", type=int, default=None)

    ip = isub.add_parser("filter", parents=[common], help="de-overlap regions")
    ip.add_argument("--out", type=Path, required=True)
    ip.set_defaults(func=_cmd_instruct_filter)

    ip = isub.add_parser("prompt", parents=[common], help="write request documents")
    ip.add_argument("--out", type=Path, required=True)
    ip.add_argument("--render-markers", action="store_true", help="also render marked images")
    ip.add_argument("--image-size", type=float, default=448.0)
    ip.set_defaults(func=_cmd_instruct_prompt)

    ip = isub.add_parser("generate", parents=[common], help="generate grounded conversations")
    ip.add_argument("--out", type=Path, required=True)
    ip.add_argument("--mock", action="store_true", help="use the deterministic offline client")
    ip.set_defaults(func=_cmd_instruct_generate)

    ip = isub.add_parser("validate", help="re-validate a records file")
    ip.add_argument("--records", type=Path, required=True)
    ip.add_argument("--registry-size", type=int, default=0)
    ip.set_defaults(func=_cmd_instruct_validate)

    p = sub.add_parser("selftest", help="run the oracle suites")
    p.add_argument("--corrupt", choices=CORRUPTIONS, default=None, help="negative-control corruption")
    p.set_defaults(func=_cmd_selftest)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
