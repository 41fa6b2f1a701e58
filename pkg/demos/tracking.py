"""Track a crossing car and a parked car, then label their motion.

The parked car is missed at frame 6; the tracker fills that gap with an
interpolated entry.
"""

from pseudofuse.geometry import Box7
from pseudofuse.staticrefine import MotionConfig, label_tracks
from pseudofuse.tracking import TrackerConfig, track_sequence

frames = {}
for k in range(12):
    moving = Box7(2.0 * k, 0.0, 0.8, 4.5, 1.9, 1.6, 0.0, score=0.9, frame_idx=k)
    parked = Box7(10.0, 8.0, 0.8, 4.5, 1.9, 1.6, 1.57, score=0.8, frame_idx=k)
    frames[k] = [moving, parked] if k != 6 else [moving]

for t in label_tracks(track_sequence(frames, TrackerConfig()), MotionConfig()):
    print(f"track {t.track_id}: frames {t.frames[0]}-{t.frames[-1]}, {len(t.entries)} entries, {t.motion_state}")
