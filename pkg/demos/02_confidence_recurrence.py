#!/usr/bin/env python3
# Watch the expert-confidence recurrence converge, then turn the final
# confidences into soft-voting weights.
#
# Each round an expert's confidence is a convex blend of its previous
# value, the critic's score, and the mean of its peers' scores
# (weights 0.3 / 0.4 / 0.3). With every score pinned at 0.9 the sequence
# has the closed form c_t = 0.9 * (1 - 0.3**t).

from forge.consensus import converged, integration_weights, update_confidence

critic_score = 0.9
peer_scores = [0.9, 0.9]

print("round  confidence      closed form     check")
c, prev = 0.0, 0.0
for t in range(1, 11):
    prev, c = c, update_confidence(c, critic_score, peer_scores)
    closed = 0.9 * (1 - 0.3**t)
    done, reason = converged([c, c], [prev, prev], tau=0.8, eps=0.03)
    print(f"{t:4d}   {c:.10f}    {closed:.10f}    {reason}")

print()
print("distance from the 0.9 fixed point after 10 rounds:", abs(c - 0.9))

# Soft voting: exponential weights over final confidences. Adding a
# constant to every confidence changes nothing; the strongest expert
# always keeps the largest share.
finals = [0.83, 0.91, 0.87]
weights = integration_weights(finals)
shifted = integration_weights([f + 0.5 for f in finals])
print()
print("confidences:    ", finals)
print("weights:        ", [round(w, 4) for w in weights])
print("shifted weights:", [round(w, 4) for w in shifted])
print("weights sum to:  ", sum(weights))
