"""Context-adjusted weakly-supervised semantic segmentation on synthetic scenes.

Subpackages:

* :mod:`ctxseg.scm` -- exact inference on small discrete structural causal
  models; verifies the backdoor-adjustment identity and the NWGM
  approximation gap independently of any neural component.
* :mod:`ctxseg.scenegen` -- deterministic generator of synthetic multi-object
  scenes with a controllable class co-occurrence confound.
* :mod:`ctxseg.models` -- the multi-label classifier (with context-map
  concatenation and a GAP head for CAM) and the per-pixel segmenter.
* :mod:`ctxseg.camseed` -- class activation maps and seed-mask thresholding.
* :mod:`ctxseg.maskexpand` -- random-walk seed expansion on a fixed
  color/position affinity graph.
* :mod:`ctxseg.context` -- class-average confounder set and attention-weighted
  context maps.
* :mod:`ctxseg.pipeline` -- the iterative round loop, mIoU metric,
  checkpointing and reports.
* :mod:`ctxseg.cli` -- the ``ctxseg`` command-line entry point.
"""

__version__ = "0.1.0"

IGNORE = 255
"""Pixel value excluded from losses and metrics in all class-id rasters."""
