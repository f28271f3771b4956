# Core hand contact modules
