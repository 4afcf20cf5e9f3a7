from harmonykb.perf import tune

tune(threads=1)
