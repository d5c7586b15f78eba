import sys

from repoplan.cli import main

sys.exit(main())
