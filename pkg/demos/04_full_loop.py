"""The full iterative loop on a small dataset, with per-round metrics.

Round 0 trains everything with a zero context channel; each later round
injects the context map estimated from the previous round's predictions.
Prints the metric history and writes the mIoU trend plot plus an overlay
for one training image.

Run:  python3 demos/04_full_loop.py  (writes under out/demo_loop)
"""

from dataclasses import replace
from pathlib import Path

from ctxseg.config import default_experiment_config
from ctxseg.pipeline import run_pipeline
from ctxseg.render import render_image_row, render_metric_plot
from ctxseg.rasters import read_manifest
from ctxseg.scenegen import SceneConfig, prepare_dataset

out_dir = Path("out/demo_loop")
exp = default_experiment_config()
scene = SceneConfig(n_images=120, seed=21)
prepare_dataset(scene, out_dir / "dataset")

run_config = replace(exp.run, rounds=2,
                     classifier=replace(exp.run.classifier, epochs=60),
                     segmenter=replace(exp.run.segmenter, epochs=40))
report = run_pipeline(out_dir / "dataset", out_dir / "run", run_config,
                      n_classes=scene.n_classes)
for entry in report["history"]:
    print(
        f"round {entry['round']}: seed-mask mIoU {entry['cam_miou']:.4f}  "
        f"pseudo-mask mIoU {entry['pseudo_miou']:.4f}  "
        f"segmentation mIoU {entry['seg_miou']:.4f}"
    )

records = read_manifest(out_dir / "dataset" / "manifest_train.jsonl")
overlay = render_image_row(out_dir / "dataset", out_dir / "run",
                           records[0].id, run_config.rounds,
                           out_dir / "overlay.png")
plot = render_metric_plot(out_dir / "run", out_dir / "miou.png")
print(f"overlay: {overlay}")
print(f"metric plot: {plot}")
