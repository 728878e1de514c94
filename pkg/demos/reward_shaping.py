"""Why a distance-based localization reward helps when boxes miss.

Slide a 64-px proposal away from a 64-px target in the 512-px view and
compare the IoU reward (flat zero once the boxes separate) with the
region-guided reward (still ordered by distance).
"""

from cropzoom.geometry import BBox, center_distance
from cropzoom.rewards import RewardConfig, reward_iou, reward_region_guided

target = BBox(200, 200, 264, 264)
cfg = RewardConfig()

print(f"{'shift':>6} {'distance':>9} {'r_iou':>7} {'r_rg':>8}")
for shift in (0, 16, 32, 63, 64, 96, 128, 256, 400):
    pred = BBox(200 + shift, 200, 264 + shift, 264)
    print(
        f"{shift:>6} {center_distance(pred, target):>9.1f} "
        f"{reward_iou(pred, target):>7.3f} {reward_region_guided(pred, target, cfg):>8.4f}"
    )

# Once the boxes are disjoint every proposal looks the same to r_iou;
# r_rg still ranks a near miss above a far one.
