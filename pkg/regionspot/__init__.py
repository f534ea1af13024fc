# RegionSpot: region recognition over frozen localization and vision-language encoders
