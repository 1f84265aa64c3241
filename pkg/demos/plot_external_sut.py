"""
Plugging in an external system under test
=========================================

Any program that speaks the line-delimited JSON protocol on stdin/stdout can
be tested. The package ships a tiny stub that answers with uniform class
probabilities or a fixed grid of interest points.
"""

import numpy as np

from viewmt.imqual import ImageBuffer
from viewmt.suts import ExternalSut, SutCrashed, echo_stub_command, run_sut

rng = np.random.default_rng(0)
img = ImageBuffer(rng.uniform(0, 1, (36, 64, 3)))

###############################################################################
# A well behaved child process

with ExternalSut("echo", echo_stub_command(4), "classify") as sut:
    print(run_sut(sut, img).probs)

with ExternalSut("echo", echo_stub_command(), "detect") as sut:
    print(run_sut(sut, img).points[:3])

###############################################################################
# A child that garbles its second reply. The harness raises, restarts the
# process, and carries on.

with ExternalSut("bad", echo_stub_command(bad_id=1), "classify") as sut:
    for i in range(3):
        try:
            print(i, run_sut(sut, img).probs)
        except SutCrashed as e:
            print(i, "failed:", e)
