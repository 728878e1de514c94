"""Score a small benchmark from recorded model transcripts.

Builds a three-question dataset on a virtual image, replays scripted
completions through the batch runner and prints per-level accuracy and
APO IoU.  The same flow is available as ``cropzoom eval``.
"""

from cropzoom.backends import ScriptedBackend
from cropzoom.dataset import QASample
from cropzoom.evaluation import aggregate_report
from cropzoom.geometry import BBox, Resolution
from cropzoom.orchestrator import EpisodeConfig, run_batch
from cropzoom.protocol import render_bbox_json
from cropzoom.rewards import LexicalOracle

res = Resolution(4096, 4096)
samples = [
    QASample("g", "sim://bench", res, "Is the scene urban?", "global", "urban-rural", "urban"),
    QASample("r", "sim://bench", res, "What is this area used for?", "region", "function", "port", BBox(512, 512, 1536, 1280)),
    QASample("o", "sim://bench", res, "What is the vehicle?", "object", "category", "car", BBox(3000, 3000, 3100, 3080)),
]


def propose(box):
    return "<think>Zooming in. " + render_bbox_json(BBox(*box), "roi") + "</think>"


script = {
    ("g", 1): "<think>Dense streets.</think><answer>urban</answer>",
    ("r", 1): propose([64, 64, 192, 160]),
    ("r", 2): "<think>Piers and cranes.</think><answer>harbor</answer>",
    ("o", 1): propose([300, 300, 310, 310]),
    ("o", 2): "<think>Four wheels.</think><answer>automobile</answer>",
}

results = run_batch(samples, ScriptedBackend(script), cfg=EpisodeConfig(workers=2))
report = aggregate_report(results, samples, LexicalOracle())
print(report.format_table())
# "harbor" and "automobile" count as correct through the synonym lexicon;
# the object proposal misses its target, which APO IoU reflects.
