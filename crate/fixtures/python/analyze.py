#!/usr/bin/env python3
import sys

import pandas as pd

from lib import loader


def main():
    frame = pd.DataFrame(loader.load(sys.argv[1]))
    print(frame.describe())


if __name__ == "__main__":
    main()
