import sys

from roundsched.cli import main

sys.exit(main())
