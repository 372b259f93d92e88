import sys

from ngem.cli import main

sys.exit(main())
