import sys

from nstore.runtime import main

sys.exit(main())
