import sys

from dplc.cli import main

sys.exit(main())
