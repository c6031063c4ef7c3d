"""Graph / class / average-size counts for the four benchmark archives."""

import sys

from kgnn.tudataset import dataset_stats, load_dataset_dir

NAMES = ("PROTEINS", "DD", "IMDB-B", "IMDB-M")

if __name__ == "__main__":
    status = 0
    for name in sys.argv[1:] or NAMES:
        try:
            s = dataset_stats(load_dataset_dir(name))
        except (OSError, ValueError) as e:
            print(f"{name:10s} unavailable: {e}")
            status = 1
            continue
        print(f"{name:10s} graphs={s['graphs']:5d} classes={s['classes']} avg_nodes={s['avg_nodes']:.2f}")
    sys.exit(status)
