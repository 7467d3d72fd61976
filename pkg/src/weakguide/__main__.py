import sys

from weakguide.cli import main

sys.exit(main())
