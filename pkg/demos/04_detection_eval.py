"""Evaluating the stand-in ship detector and the berthing gate.

The detector perturbs ground-truth boxes with seeded noise (jitter, misses,
false positives). Scored on the bundled 24 scenes it lands near the
reference AP of 0.92. The berthing gate then separates a ship at the quay
from one passing in the channel.
"""

from portmon import detection as det
from portmon import sim
from portmon.cli import data_path

scenes = det.load_dataset(data_path("ships24"))
noise = det.DetectorNoise.load(data_path("detector_noise.json"))
ap, dets = det.evaluate(scenes, noise)
print(f"{len(scenes)} scenes, {sum(len(s.boxes) for s in scenes)} ships, {len(dets)} detections")
print(f"AP@0.5 = {ap:.4f}")
for th, p, r in det.threshold_sweep(dets, det.ground_truth_index(scenes))[::2]:
    print(f"  score >= {th:.2f}: precision {p:.3f}, recall {r:.3f}")

print("\nearly stopping on a synthetic validation curve:")
state = det.EarlyStopState()
curve = [min(0.92, 0.3 + 0.015 * e) for e in range(1, 200)]
for epoch, value in enumerate(curve, start=1):
    step = det.early_stop_step(state, epoch, value)
    if isinstance(step, det.Stop):
        print(f"  stopped at epoch {epoch}, keeping checkpoint {step.best_epoch}")
        break

print("\nberthing gate:")
berthing = sim.Scenario(duration_s=1000.0, ship_events=[sim.berthing_ship(0.0)])
passing = sim.Scenario(duration_s=1000.0, ship_events=[sim.passing_ship(0.0)])
for name, scenario, t in [("berthing ship at the quay", berthing, 200.0),
                          ("berthing ship far out", berthing, 5.0),
                          ("passing ship, closest approach", passing, 60.0)]:
    scene, _ = sim.gen_scene(t, scenario)
    found = det.detect(scene, det.DetectorNoise.perfect())
    ok, chosen = det.classify_berthing(found)
    area = chosen.bbox.area / (1024 * 1024) if chosen else found[0].bbox.area / (1024 * 1024)
    print(f"  {name:<32} box area {area:5.3f} of frame -> berthing={ok}")
