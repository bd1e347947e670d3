import sys

from vmrn.cli import main

sys.exit(main())
