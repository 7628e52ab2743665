import sys

from dyncausal.cli import main

sys.exit(main())
