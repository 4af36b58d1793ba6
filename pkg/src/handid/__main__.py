import sys

from handid.cli import main

sys.exit(main())
