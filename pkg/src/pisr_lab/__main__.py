import sys

from pisr_lab.cli import main

sys.exit(main())
