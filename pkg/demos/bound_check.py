"""The Jensen form of the dequantization bound against the stronger printed form."""
from labelflows import theory

rows = theory.theorem_check(n_random=10, seed=0)
print(f"{'inst':>4} {'lhs':>10} {'log q - log|W|':>15} {'M log q':>10}  jensen printed")
for r in rows:
    print(f"{r['instance']:>4} {r['lhs']:>10.4f} {r['jensen_rhs']:>15.4f} {r['printed_rhs']:>10.4f}  "
          f"{'ok' if r['jensen_ok'] else 'FAIL':>6} {'ok' if r['printed_ok'] else 'fails':>7}")
