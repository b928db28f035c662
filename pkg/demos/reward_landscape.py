"""How the three reward factors trade off against each other.

Run with ``python3 demos/reward_landscape.py``; prints small tables only.
"""
from __future__ import annotations

import numpy as np

from ddc.reward import TeacherReference, Thresholds, combined_reward, failure_reward

# %% a VGG11-sized teacher: 92% accuracy, 4 ms per image, 9.2M parameters
teacher = TeacherReference(accuracy=0.92, latency=0.004, parameters=9_231_114)
th = Thresholds()

# %% the teacher itself scores almost nothing: it is too slow and too large
print("teacher reward:", combined_reward(0.92, 0.004, 9_231_114, teacher, th).reward)

# %% accuracy sweep at 1/5 latency and 1/20 size
for frac in np.linspace(0.6, 1.0, 9):
    r = combined_reward(frac * teacher.accuracy, 0.2 * teacher.latency, teacher.parameters // 20, teacher, th)
    print(f"a/a_t={frac:.2f}  R1={r.accuracy:.3f}  R={r.reward:.3f}")

# %% size sweep at teacher accuracy and 1/5 latency
for frac in (0.05, 0.2, 0.4, 0.6, 0.8, 1.0):
    r = combined_reward(teacher.accuracy, 0.2 * teacher.latency, int(frac * teacher.parameters), teacher, th)
    print(f"c/c_t={frac:.2f}  R3={r.size:.3f}  R={r.reward:.3f}")

# %% students that fail to train are scored as zero accuracy at teacher cost
print("failure reward:", failure_reward(teacher, th).reward)
