"""Walk one question through the look-then-zoom loop.

A 4096 x 3072 synthetic image holds a small red marker.  A scripted model
first sees the 512-px global view and proposes a box there; the engine maps
the box back to full resolution, cuts a 512 x 512 window around it and sends
that crop in the second turn.
"""

import numpy as np

from cropzoom.backends import ScriptedBackend
from cropzoom.dataset import QASample
from cropzoom.geometry import BBox, Resolution
from cropzoom.images import materialize, register_array
from cropzoom.orchestrator import run_episode
from cropzoom.protocol import render_bbox_json

pixels = np.full((3072, 4096, 3), 60, dtype=np.uint8)
pixels[2000:2060, 3100:3180] = (220, 30, 30)
uri = register_array("demo-scene", pixels)

sample = QASample(
    sample_id="marker",
    image=uri,
    resolution=Resolution(4096, 3072),
    question="What color is the small marker?",
    level="object",
    category="color/pattern",
    answer="red",
    bbox=BBox(3100, 2000, 3180, 2060),
)

# In the 512 x 384 view the marker sits near (392, 253).
stage1 = "<think>The marker is tiny; I should zoom. " + render_bbox_json(BBox(386, 249, 398, 258), "marker") + "</think>"
stage2 = "<think>The crop shows a solid red patch.</think><answer>red</answer>"
backend = ScriptedBackend({("marker", 1): stage1, ("marker", 2): stage2})

result = run_episode(sample, backend)
print("global view       :", result.view_resolution)
print("proposal (view)   :", result.proposal_bbox.as_list())
print("proposal (source) :", [round(v, 1) for v in result.predicted_bbox.as_list()])
print("zoom window       :", result.crop_used.as_list())
print("final answer      :", result.final_answer)

crop = result.prompts[2][-1].images[0]
patch = np.asarray(materialize(crop))
print("crop pixels       :", patch.shape, "red pixels:", int((patch[..., 0] > 200).sum()))
