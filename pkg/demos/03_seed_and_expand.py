"""One baseline round, piece by piece: CAMs, seeds, random-walk expansion.

Trains the classifier with a zero context channel on a small dataset, then
walks a single image through the mask-generation stages and writes each
intermediate as a raster row:

    image | seed mask | expanded pseudo-mask | ground truth

Run:  python3 demos/03_seed_and_expand.py  (writes under out/demo_seed)
"""

from pathlib import Path

from ctxseg.camseed import compute_cam, threshold_seeds
from ctxseg.config import default_experiment_config
from ctxseg.maskexpand import build_affinity, random_walk_expand
from ctxseg.models import ClassifierSpec, classifier_forward, train_classifier
from ctxseg.pipeline import load_gt_masks, load_training_set, miou
from ctxseg.rasters import read_manifest, write_image
from ctxseg.render import colorize_mask, composite_panels
from ctxseg.scenegen import SceneConfig, prepare_dataset

out_dir = Path("out/demo_seed")
exp = default_experiment_config()
prepare_dataset(SceneConfig(n_images=80, seed=3), out_dir / "dataset")
records = read_manifest(out_dir / "dataset" / "manifest_train.jsonl")
train_set = load_training_set(out_dir / "dataset", records, n_classes=4)
gt_masks = load_gt_masks(out_dir / "dataset", records)

spec = ClassifierSpec(n_classes=4)
params = train_classifier(train_set.images, train_set.label_sets, spec,
                          exp.run.classifier)
print(f"classifier loss: {params.train_losses[0]:.3f} -> {params.train_losses[-1]:.4f}")

index = next(i for i, ls in enumerate(train_set.label_sets) if len(ls) >= 2)
image = train_set.images[index]
labels = train_set.label_sets[index]
print(f"image {records[index].id} with labels {sorted(labels)}")

result = classifier_forward(params, image)
cams = compute_cam(result.block_features, result.head_weights, labels)
seeds = threshold_seeds(cams, exp.run.theta_fg, exp.run.theta_bg, image.shape[:2])
graph = build_affinity(image, gamma=exp.run.gamma, beta=exp.run.beta,
                       sigma_rgb=exp.run.sigma_rgb, sigma_xy=exp.run.sigma_xy)
pseudo = random_walk_expand(graph, seeds, labels, exp.run.walk_iters)

print(f"seed mIoU:   {miou(seeds, gt_masks[index], 4).mean:.4f}")
print(f"pseudo mIoU: {miou(pseudo, gt_masks[index], 4).mean:.4f}")

row = composite_panels([
    image,
    colorize_mask(seeds),
    colorize_mask(pseudo),
    colorize_mask(gt_masks[index]),
])
write_image(out_dir / "stages.png", row)
print(f"stages (image | seeds | pseudo | truth): {out_dir / 'stages.png'}")
