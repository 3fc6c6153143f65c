"""Walk through the noise schedule: sigma grid, timestep pmf, curriculum and teacher steps.

Run:  python3 demos/01_noise_schedule.py
"""
import numpy as np

from ectraj.schedule import (
    alpha_table,
    build_pmf,
    build_sigmas,
    curriculum_N,
    sample_student_index,
    TeacherScheduler,
    teacher_index,
)

# The Karras grid runs from sigma_min to sigma_max with a sigma_0 = 0 pad.
sig = build_sigmas(10)
print("sigma grid, N=10:", np.round(sig.sigmas, 4))

# The student timestep is drawn from a discretised lognormal over the grid.
pmf = build_pmf(build_sigmas(20))
print("pmf, N=20:       ", np.round(pmf.pmf, 3), "mode index", int(np.argmax(pmf.pmf)) + 1)
draws = sample_student_index(pmf, np.random.default_rng(0), size=10)
print("ten student draws:", draws)

# The grid doubles every third of training.
print("curriculum over 60 epochs:", sorted({curriculum_N(e, 60) for e in range(1, 61)}))

# The teacher sits a few grid steps below the student; the gap shrinks as training advances.
sched = TeacherScheduler(E=60)
for epoch in (1, 25, 50):
    N = curriculum_N(epoch, 60)
    print(f"epoch {epoch:2d} (N={N}): student t={N} -> teacher r={teacher_index(N, epoch, sched, N)}")

# Range of the teacher/student factor per (q, N): the table the tests compare against.
for (q, N), (lo, hi) in alpha_table().items():
    print(f"q={q:g} N={N:2d}: [{lo:.3f}, {hi:.3f}]")
