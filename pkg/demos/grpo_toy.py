"""Train a toy box-proposal policy with GRPO on synthetic scenes.

Each question's policy is a softmax over a 16 x 16 lattice of box centres.
Rollouts go through the real episode loop; the perception stub answers
correctly only when the crop contains the target.  Watch the mean centre
distance shrink as the composite reward pulls proposals onto targets.
"""

import argparse

from cropzoom import simlab

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--steps", type=int, default=400)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

scenes = simlab.default_suite(args.seed)
questions = simlab.cropping_questions(scenes)
policy = simlab.GridSoftmaxPolicy(len(questions), scenes[0].resolution)
trace = simlab.train_grpo(policy, scenes, simlab.SimConfig(), steps=args.steps, seed=args.seed)

print(f"{len(questions)} cropping questions over {len(scenes)} scenes")
print(f"{'step':>5} {'reward':>8} {'distance':>9} {'iou>0':>6} {'acc':>6}")
for rec in trace.records[:: max(1, args.steps // 10)]:
    print(
        f"{rec.step:>5} {rec.mean_reward:>8.3f} {rec.mean_center_distance:>9.1f} "
        f"{rec.nonzero_iou_fraction:>6.2f} {rec.answer_accuracy:>6.2f}"
    )
