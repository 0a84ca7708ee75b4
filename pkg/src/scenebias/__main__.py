import sys

from scenebias.cli import main

sys.exit(main())
