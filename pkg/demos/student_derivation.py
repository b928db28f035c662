"""Turning keep/remove decisions into student architectures.

Run with ``python3 demos/student_derivation.py``; no training happens here.
"""
from __future__ import annotations

import numpy as np

from ddc.arch import count_parameters, derive_student, encode_architecture, resnet18, vgg11
from ddc.policy import PolicyNetwork, action_probabilities, sample_trajectories

# %% removable layers and the policy input for each teacher
for teacher in (vgg11(10), resnet18(10)):
    enc = encode_architecture(teacher)
    print(teacher.family.value, "removable:", enc.shape[0], "params:", count_parameters(teacher))

# %% an untrained policy keeps most layers (head bias +2 gives p_keep near 0.88)
teacher = vgg11(10)
enc = encode_architecture(teacher)
policy = PolicyNetwork(enc.shape[1])
print("keep probabilities:", np.round(action_probabilities(policy, enc), 3))

# %% sample a few students and see how much each one saves
for traj in sample_trajectories(policy, enc, 5, rng=0):
    student = derive_student(teacher, traj.actions)
    ratio = count_parameters(teacher) / count_parameters(student)
    print(traj.actions, f"ratio {ratio:.2f}", f"log pi {traj.log_prob:.2f}")

# %% emptying a residual block leaves an identity or a 1x1 projection behind
rn = resnet18(10)
actions = [1] * encode_architecture(rn).shape[0]
actions[-2:] = [0, 0]
student = derive_student(rn, actions)
print("resnet18 layers:", len(rn.layers), "->", len(student.layers))
