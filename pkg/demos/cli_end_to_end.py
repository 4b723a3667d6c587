"""
CLI end to end: synth -> run -> eval
====================================

Drives the command line interface programmatically: generates a planar
image fixture, runs odometry over its rendered frames, and scores the
estimate against the bundled ground truth.  The same commands work from
a shell as `monovo synth|run|eval ...`.
"""

import pathlib
import tempfile

from monovo.cli import main

work = pathlib.Path(tempfile.mkdtemp(prefix="monovo_demo_"))
fix = work / "fixture"

print(f"workspace: {work}\n")

print("$ monovo synth planar --frames 60 --landmarks 400 --seed 9 --out", fix)
assert main(["synth", "planar", "--frames", "60", "--landmarks", "400",
             "--seed", "9", "--out", str(fix)]) == 0

traj = work / "estimated.txt"
print(f"\n$ monovo run {fix}/images --calib {fix}/calib.txt --traj {traj}")
assert main(["run", str(fix / "images"), "--calib", str(fix / "calib.txt"),
             "--traj", str(traj)]) == 0

print(f"\n$ monovo eval {traj} {fix}/gt.txt")
assert main(["eval", str(traj), str(fix / "gt.txt")]) == 0

print(f"\nreport written next to the trajectory: {traj}.report.txt")
