# coding: utf-8

# # Why a per-bit vote helps
#
# Model each branch bit as flipping independently with probability p. A token
# survives when every bit keeps its majority.

# In[1]:

import numpy as np

from votetok.quantizer import aggregate_infer, code_to_token, token_to_code
from votetok.vote_analysis import (FlipModel, load_case_table, majority_override_rate, monte_carlo_survival,
                                   replay_case, token_survival_prob, voter_param_overhead)


# In[2]:

for p in (0.01, 0.05, 0.1, 0.2):
    row = [token_survival_prob(FlipModel(n, 13, p)) for n in (1, 3, 5, 7)]
    print(f"p={p:4.2f}  " + "  ".join(f"n={n}: {s:.4f}" for n, s in zip((1, 3, 5, 7), row)))


# The closed form agrees with simulation.

# In[3]:

m = FlipModel(5, 13, 0.1)
est, se = monte_carlo_survival(m, 200_000, seed=0)
print(f"analytic {token_survival_prob(m):.5f}  simulated {est:.5f} +/- {se:.5f}")
print(f"vote right while most branches are wrong: {majority_override_rate(m, 100_000):.3f}")


# ## Every voter wrong, vote right
#
# Five voters, each with a different flipped bit.

# In[4]:

ref = np.ones(5, dtype=int)
codes = np.tile(ref, (5, 1)) - 2 * np.eye(5, dtype=int)
print("voter tokens:", [int(code_to_token(c)) for c in codes])
print("voted token: ", int(code_to_token(aggregate_infer(codes))), "reference", int(code_to_token(ref)))


# ## Replaying a recorded case
#
# Four positions of 13-bit tokens from five voters.

# In[5]:

for r in replay_case(load_case_table()):
    print(f"position {r.position}: voted {r.voted}, wrong voters {r.wrong_voters}/5, recovered {r.recovered}")
    for bit, (zeros, ones) in sorted(r.bit_votes.items()):
        print(f"    bit {bit}: {zeros} vote 0, {ones} vote 1")


# ## Cost of more voters
#
# Each extra branch is one D x d projection plus a bias.

# In[6]:

for n in (1, 3, 5, 7):
    print(f"n={n}: {voter_param_overhead(n, 1280, 13):,} voter parameters")
print("token 3485 bits (LSB first):", token_to_code(3485, 13).clip(0).tolist())
