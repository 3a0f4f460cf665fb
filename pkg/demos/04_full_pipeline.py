#!/usr/bin/env python3
"""The whole pipeline on a synthetic corpus, through the library API.

Stages: train the classification head on pooled box features, generate and
fuse pseudo labels, train the segmentation head with the noise-aware loss,
and score everything against the corpus ground truth. The same run is
available from the shell:

    bana synth --out corpus --images 20 --size 64
    bana run --config config.json
"""

import json
from pathlib import Path

from bana.pipeline import PipelineConfig, run_pipeline
from bana.synth import synth_corpus

out_dir = Path(__file__).resolve().parent / "demo_out"
corpus = out_dir / "pipeline_corpus"
if not (corpus / "meta.json").exists():
    synth_corpus(corpus, seed=0, num_images=20, size=64, num_classes=3)

cfg = PipelineConfig(
    corpus_dir=str(corpus),
    out_dir=str(out_dir / "pipeline_run"),
    head_epochs=40,
    seg_epochs=25,
    dump_attention=True,
)
(out_dir / "pipeline_config.json").write_text(cfg.to_json())

artifacts = run_pipeline(cfg)
for stage, path in artifacts.items():
    print(f"stage {stage:10s} -> {path}")

report = json.loads(Path(artifacts["eval"]).read_text())
pl = report["pseudo_labels"]
print("\npseudo labels vs ground truth:")
print(f"  CRF labels        mIoU {pl['crf']['miou']:.3f}")
print(f"  retrieval labels  mIoU {pl['ret']['miou']:.3f}")
print(f"  fused (claimed)   mIoU {pl['fused_claimed']['miou']:.3f} "
      f"at {pl['fused_coverage']:.1%} coverage")
print(f"segmentation head   mIoU {report['segmentation']['miou']:.3f}")
print("\nrerunning with the same config reproduces every artifact byte for byte.")
