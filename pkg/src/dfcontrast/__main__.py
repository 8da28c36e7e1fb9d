import sys

from dfcontrast.cli import main

sys.exit(main())
